"""Stage-wise training: Adam with clipping, warmup/cosine schedules,
and one deterministic training loop per pipeline stage.

Stages run separately and in order. The tokenizer stage trains the
quantizers (EMA), the speaker pathway, and a throwaway mel decoder
whose only job is to supply the mel-matching gradient that shapes the
condition encoder; the checkpointed decoder is trained afterwards by
the flow stage against the then-frozen tokenizer. The AR and refiner
stages consume tokens from the frozen tokenizer, never touching its
weights, so its checkpoint bytes stay fixed once written.

Every batch index, noise draw, and reseed comes from counter-based
streams keyed by (schedule seed, step), so a rerun with the same config
reproduces the loss curve exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ar import DualStreamAR
from ..engine import Rng, Tensor, gradients
from ..flow import VelocityField, cfm_train_loss
from ..nar import CoupledNAR
from ..tokenizer import ParallelTokenizer
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import CorpusItem, reference_pairing, text_ids_for

STAGES = ("tokenizer", "ar", "nar", "flow")

CHECKPOINT_NAMES = {stage: f"{stage}.ckpt" for stage in STAGES}


class TrainingDiverged(RuntimeError):
    """A stage produced a non-finite loss; the message says where."""


class MissingPrerequisite(FileNotFoundError):
    """A stage needs an earlier stage's checkpoint that is not there."""


@dataclass
class TrainSchedule:
    """Step budget and learning-rate shape for one stage.

    The rate climbs linearly from `base_lr` at step 0 to `peak_lr` at
    `warmup_steps`, then either stays at the peak (`constant`) or
    follows a half-cosine down to `final_lr` at `total_steps`.
    """

    total_steps: int
    warmup_steps: int
    kind: str
    base_lr: float
    peak_lr: float
    final_lr: float
    batch_size: int
    seed: int

    def validate(self) -> None:
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"schedule kind must be 'constant' or 'cosine', got {self.kind!r}")
        for name in ("base_lr", "peak_lr", "final_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def learning_rate(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr + (self.peak_lr - self.base_lr) * (step / self.warmup_steps)
        if self.kind == "constant":
            return self.peak_lr
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam with decoupled global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, clip_norm: float | None = 2.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps, self.clip_norm = beta1, beta2, eps, clip_norm
        self.m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        sq = 0.0
        for g in grads.values():
            sq += float((g.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm > 0:
            scale = self.clip_norm / norm
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k].astype(np.float64) * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            update = lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
        return norm


@dataclass
class StageReport:
    stage: str
    steps: int
    wall_time_s: float
    losses: dict[str, list] = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "steps": self.steps,
                "wall_time_s": self.wall_time_s, "losses": self.losses,
                "final": self.final}

    def summary(self) -> str:
        bits = [f"{self.stage}: {self.steps} steps in {self.wall_time_s:.1f}s"]
        for key, curve in self.losses.items():
            if curve:
                bits.append(f"{key} {curve[0]:.4g} -> {curve[-1]:.4g}")
        return "; ".join(bits)


def _record(losses: dict, terms: dict) -> None:
    for k, v in terms.items():
        losses.setdefault(k, []).append(float(v))


def _check_finite(stage: str, step: int, terms: dict) -> None:
    bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"{stage} stage: non-finite loss at step {step}: {bad}")


def _mean_loss(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def _progress(stage: str, step: int, total: int, terms: dict, quiet: bool) -> None:
    if quiet or (step % max(1, total // 10) and step != total - 1):
        return
    shown = ", ".join(f"{k}={v:.4f}" for k, v in terms.items())
    print(f"[{stage}] step {step + 1}/{total}  {shown}", flush=True)


# ---- stage loops ---------------------------------------------------------------


def train_tokenizer(items: list[CorpusItem], pcfg, quiet: bool = True):
    """Quantizers by EMA plus the speaker pathway by backprop.

    Returns (tokenizer, scratch mel decoder, report). The scratch
    decoder exists to give the condition encoder a mel-grounded
    gradient; it is not the checkpointed one.
    """
    sched = TrainSchedule(**vars(pcfg.schedules["tokenizer"]))
    sched.validate()
    tok = ParallelTokenizer(pcfg.build_tokenizer_config())
    scratch = VelocityField(pcfg.build_flow_config(), Rng(pcfg.flow.seed).spawn("scratch"))
    params = dict(tok.named_parameters())
    params.update({f"scratch.{k}": v for k, v in scratch.named_parameters().items()})
    opt = Adam(params)
    rng = Rng(sched.seed)
    names = list(params)
    tensors = list(params.values())
    losses: dict[str, list] = {}
    t0 = time.perf_counter()
    for step in range(sched.total_steps):
        srng = rng.spawn(("step", step))
        idx = srng.integers(0, len(items), (sched.batch_size,))
        batch = [items[i] for i in idx]
        for name, stack in tok.stacks.items():
            frames = np.concatenate([tok.stream_frames(it.bundle)[name] for it in batch])
            stack.train_step(frames, srng.spawn(("reseed", name)))
        outs = [tok.tokenizer_loss(it.bundle, scratch, srng.spawn(("cfm", j)))
                for j, it in enumerate(batch)]
        grad_loss = _mean_loss([o["grad_loss"] for o in outs])
        terms = {k: float(np.mean([o[k] for o in outs]))
                 for k in ("L_Sem", "L_Acous", "L_Speaker", "L_Mel", "total")}
        _check_finite("tokenizer", step, terms)
        grads = dict(zip(names, gradients(grad_loss, tensors)))
        opt.step(grads, sched.learning_rate(step))
        _record(losses, terms)
        _progress("tokenizer", step, sched.total_steps, terms, quiet)
    report = StageReport("tokenizer", sched.total_steps, time.perf_counter() - t0, losses)
    report.final = tokenizer_metrics(tok, items)
    return tok, scratch, report


def tokenizer_metrics(tok: ParallelTokenizer, items: list[CorpusItem]) -> dict:
    out: dict = {"recon_mse": {}, "input_variance": {}, "utilization": {}, "perplexity": {}}
    for name, stack in tok.stacks.items():
        frames = np.concatenate([tok.stream_frames(it.bundle)[name] for it in items])
        _, quantized, _ = stack.encode(frames)
        out["recon_mse"][name] = float(((frames - quantized) ** 2).mean())
        out["input_variance"][name] = float(frames.var())
        out["utilization"][name] = stack.utilization(frames)
        out["perplexity"][name] = stack.perplexity(frames)
    return out


def token_grids(tok: ParallelTokenizer, items: list[CorpusItem]) -> list[np.ndarray]:
    """(T, n_streams, L) integer grids for every item, in stack order."""
    grids = []
    for it in items:
        streams = tok.encode_streams(it.bundle)
        grids.append(np.stack([streams[name] for name in tok.stacks], axis=1))
    return grids


def train_ar(items: list[CorpusItem], pcfg, tok: ParallelTokenizer, quiet: bool = True):
    sched = TrainSchedule(**vars(pcfg.schedules["ar"]))
    sched.validate()
    cfg = pcfg.build_ar_config()
    model = DualStreamAR(cfg)
    grids = token_grids(tok, items)
    refs = reference_pairing(items)
    rows = [(text_ids_for(it.bundle),
             grids[refs[i]][:, :, :cfg.layers_per_stream],
             grids[i][:, :, :cfg.layers_per_stream])
            for i, it in enumerate(items)]
    params = dict(model.named_parameters())
    opt = Adam(params)
    names, tensors = list(params), list(params.values())
    rng = Rng(sched.seed)
    losses: dict[str, list] = {}
    t0 = time.perf_counter()
    for step in range(sched.total_steps):
        srng = rng.spawn(("step", step))
        idx = srng.integers(0, len(rows), (sched.batch_size,))
        out = model.ar_loss(*model.teacher_forced_batch([rows[i] for i in idx]))
        terms = {k: float(v.data) for k, v in out.items()}
        _check_finite("ar", step, terms)
        grads = dict(zip(names, gradients(out["total"], tensors)))
        opt.step(grads, sched.learning_rate(step))
        _record(losses, terms)
        _progress("ar", step, sched.total_steps, terms, quiet)
    report = StageReport("ar", sched.total_steps, time.perf_counter() - t0, losses)
    report.final = {"teacher_forced_accuracy": ar_accuracy(model, rows)}
    return model, report


def ar_accuracy(model: DualStreamAR, rows: list[tuple], chunk: int = 8) -> dict[str, float]:
    """Corpus-wide teacher-forced argmax accuracy per stream."""
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for lo in range(0, len(rows), chunk):
        part = rows[lo:lo + chunk]
        acc = model.teacher_forced_accuracy(part)
        n = sum(r[2].shape[0] for r in part) * model.cfg.layers_per_stream
        for name, frac in acc.items():
            hits[name] = hits.get(name, 0) + int(round(frac * n))
            counts[name] = counts.get(name, 0) + n
    return {name: hits[name] / counts[name] for name in hits}


def train_nar(items: list[CorpusItem], pcfg, tok: ParallelTokenizer, quiet: bool = True):
    sched = TrainSchedule(**vars(pcfg.schedules["nar"]))
    sched.validate()
    model = CoupledNAR(pcfg.build_nar_config())
    grids = token_grids(tok, items)
    refs = reference_pairing(items)
    pairs = [(grids[refs[i]], grids[i]) for i in range(len(items))]
    params = dict(model.named_parameters())
    opt = Adam(params)
    names, tensors = list(params), list(params.values())
    rng = Rng(sched.seed)
    losses: dict[str, list] = {}
    t0 = time.perf_counter()
    for step in range(sched.total_steps):
        srng = rng.spawn(("step", step))
        idx = srng.integers(0, len(pairs), (sched.batch_size,))
        out = model.nar_loss([pairs[i] for i in idx])
        terms = {k: float(v.data) for k, v in out.items()}
        _check_finite("nar", step, terms)
        grads = dict(zip(names, gradients(out["total"], tensors)))
        opt.step(grads, sched.learning_rate(step))
        _record(losses, terms)
        _progress("nar", step, sched.total_steps, terms, quiet)
    report = StageReport("nar", sched.total_steps, time.perf_counter() - t0, losses)
    report.final = {"stage_accuracy": model.stage_accuracy(pairs)}
    return model, report


def train_flow(items: list[CorpusItem], pcfg, tok: ParallelTokenizer, quiet: bool = True):
    """Train the checkpointed mel decoder against the frozen tokenizer."""
    sched = TrainSchedule(**vars(pcfg.schedules["flow"]))
    sched.validate()
    field_model = VelocityField(pcfg.build_flow_config(), Rng(pcfg.flow.seed))
    feats = [tok.decode_tokens(tok.encode_streams(it.bundle)) for it in items]
    conds = [tok.speaker_condition(it.bundle.speaker_frames) for it in items]
    params = dict(field_model.named_parameters())
    opt = Adam(params)
    names, tensors = list(params), list(params.values())
    rng = Rng(sched.seed)
    losses: dict[str, list] = {}
    t0 = time.perf_counter()
    for step in range(sched.total_steps):
        srng = rng.spawn(("step", step))
        idx = srng.integers(0, len(items), (sched.batch_size,))
        parts = [cfm_train_loss(field_model, items[i].bundle.mel, feats[i], conds[i],
                                srng.spawn(("noise", j)))
                 for j, i in enumerate(idx)]
        loss = _mean_loss(parts)
        terms = {"L_Flow": float(loss.data), "total": float(loss.data)}
        _check_finite("flow", step, terms)
        grads = dict(zip(names, gradients(loss, tensors)))
        opt.step(grads, sched.learning_rate(step))
        _record(losses, terms)
        _progress("flow", step, sched.total_steps, terms, quiet)
    report = StageReport("flow", sched.total_steps, time.perf_counter() - t0, losses)
    return field_model, report


# ---- orchestration ---------------------------------------------------------------


def _load_frozen_tokenizer(ckpt_dir: Path, pcfg) -> ParallelTokenizer:
    path = ckpt_dir / CHECKPOINT_NAMES["tokenizer"]
    if not path.is_file():
        raise MissingPrerequisite(f"stage needs the frozen tokenizer at {path}; "
                                  "run `train --stage tokenizer` first")
    ckpt = load_checkpoint(path)
    mismatches = config_mismatches(ckpt.config, pcfg.to_dict(),
                                   sections=("data", "tokenizer", "ablation"))
    if mismatches:
        raise ValueError("tokenizer checkpoint config differs from this run's config: "
                         + ", ".join(mismatches))
    tok = ParallelTokenizer(pcfg.build_tokenizer_config())
    tok.load_full_state(ckpt.params)
    return tok


def config_mismatches(a: dict, b: dict, sections) -> list[str]:
    """Dotted paths where two config snapshots disagree, within `sections`."""
    out = []

    def walk(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            for key in sorted(set(x) | set(y)):
                if key not in x or key not in y:
                    out.append(f"{path}.{key}" if path else key)
                else:
                    walk(x[key], y[key], f"{path}.{key}" if path else key)
        elif x != y:
            out.append(path)

    for section in sections:
        walk(a.get(section), b.get(section), section)
    return out


def train_stage(stage: str, items: list[CorpusItem], pcfg, out_ckpt, quiet: bool = True) -> StageReport:
    """Train one stage and write its checkpoint next to its prerequisites.

    `out_ckpt` is the checkpoint file to write; stages after the
    tokenizer look for `tokenizer.ckpt` in the same directory.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "nar" and not pcfg.ablation.use_refiner:
        raise ValueError("this config has use_refiner=false (the AR model predicts "
                         "every layer); there is no refiner stage to train")
    out_path = Path(out_ckpt)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rng_tail = Rng(pcfg.schedules[stage].seed)
    if stage == "tokenizer":
        tok, _, report = train_tokenizer(items, pcfg, quiet=quiet)
        params = tok.full_state()
    else:
        tok = _load_frozen_tokenizer(out_path.parent, pcfg)
        if stage == "ar":
            model, report = train_ar(items, pcfg, tok, quiet=quiet)
        elif stage == "nar":
            model, report = train_nar(items, pcfg, tok, quiet=quiet)
        else:
            model, report = train_flow(items, pcfg, tok, quiet=quiet)
        params = model.state()
    ckpt = Checkpoint(stage=stage, config=pcfg.to_dict(), params=params,
                      rng_state=rng_tail.get_state())
    save_checkpoint(out_path, ckpt)
    return report
