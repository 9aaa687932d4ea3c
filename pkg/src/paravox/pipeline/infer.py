"""Four-stage inference: reference tokens, top pair, full grid, mel.

Loading a pipeline means reading every stage checkpoint from one
directory and checking that they were all trained against the same
config — any disagreeing field aborts with the dotted field names
rather than a shape error three layers deep.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ar import DualStreamAR
from ..engine import Rng
from ..flow import SolverConfig, VelocityField, sample_mel
from ..frontend import (BOS_ID, EOS_ID, FeatureBundle, Vocabulary,
                        default_alphabet, save_arrays)
from ..nar import CoupledNAR
from ..tokenizer import ParallelTokens, ParallelTokenizer
from .checkpoint import load_checkpoint
from .config import PipelineConfig
from .train import CHECKPOINT_NAMES, config_mismatches

_COMPAT_SECTIONS = ("data", "tokenizer", "ar", "nar", "flow", "ablation")


class IncompatibleCheckpoints(ValueError):
    """Stage checkpoints disagree on the config; message names the fields."""


@dataclass
class LoadedPipeline:
    config: PipelineConfig
    tokenizer: ParallelTokenizer
    ar: DualStreamAR
    nar: CoupledNAR | None
    flow: VelocityField

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(default_alphabet(self.config.data.vocab_size))


@dataclass
class InferenceResult:
    tokens: ParallelTokens | None
    mel: np.ndarray
    metadata: dict


def load_pipeline(ckpt_dir) -> LoadedPipeline:
    root = Path(ckpt_dir)
    stages = ["tokenizer", "ar", "flow"]
    ckpts = {}
    for stage in stages:
        path = root / CHECKPOINT_NAMES[stage]
        if not path.is_file():
            raise FileNotFoundError(f"missing {stage} checkpoint: {path}")
        ckpts[stage] = load_checkpoint(path)
        if ckpts[stage].stage != stage:
            raise IncompatibleCheckpoints(f"{path} holds a {ckpts[stage].stage!r} "
                                          f"checkpoint, expected {stage!r}")
    base = ckpts["tokenizer"].config
    for stage in stages[1:]:
        diffs = config_mismatches(base, ckpts[stage].config, _COMPAT_SECTIONS)
        if diffs:
            raise IncompatibleCheckpoints(
                f"tokenizer and {stage} checkpoints disagree on: " + ", ".join(diffs))
    pcfg = PipelineConfig.from_dict(base)
    tok = ParallelTokenizer(pcfg.build_tokenizer_config())
    tok.load_full_state(ckpts["tokenizer"].params)
    ar = DualStreamAR(pcfg.build_ar_config())
    ar.load_state(ckpts["ar"].params)
    field = VelocityField(pcfg.build_flow_config(), Rng(pcfg.flow.seed))
    field.load_state(ckpts["flow"].params)
    nar = None
    if pcfg.ablation.use_refiner:
        path = root / CHECKPOINT_NAMES["nar"]
        if not path.is_file():
            raise FileNotFoundError(f"missing nar checkpoint: {path}")
        ckpt = load_checkpoint(path)
        diffs = config_mismatches(base, ckpt.config, _COMPAT_SECTIONS)
        if diffs:
            raise IncompatibleCheckpoints(
                "tokenizer and nar checkpoints disagree on: " + ", ".join(diffs))
        nar = CoupledNAR(pcfg.build_nar_config())
        nar.load_state(ckpt.params)
    return LoadedPipeline(config=pcfg, tokenizer=tok, ar=ar, nar=nar, flow=field)


def encode_text(pipe: LoadedPipeline, text: str) -> np.ndarray:
    return pipe.vocabulary.encode(text)


def symbols_to_text_ids(symbols: np.ndarray) -> np.ndarray:
    core = np.asarray(symbols, dtype=np.int64).reshape(-1)
    return np.concatenate([[BOS_ID], core, [EOS_ID]]).astype(np.int64)


def infer(pipe: LoadedPipeline, text_ids: np.ndarray, ref_bundle: FeatureBundle,
          seed: int = 0, top_k: int | None = None, temperature: float | None = None,
          flow_steps: int | None = None, max_frames: int | None = None) -> InferenceResult:
    """Run the full pipeline for one utterance.

    `text_ids` must already be framed with the sequence marks (use
    `encode_text` for raw strings). The reference bundle supplies both
    the prompt tokens and the speaker condition. All sampling descends
    from `seed`.
    """
    cfg = pipe.config
    rng = Rng(seed)
    if not cfg.ablation.parallel_streams:
        streams = pipe.tokenizer.encode_streams(ref_bundle)
        ref_grid = np.stack([streams[name] for name in pipe.tokenizer.stacks], axis=1)
        cond = pipe.tokenizer.speaker_condition(ref_bundle.speaker_frames)
    else:
        ref_pair, cond = pipe.tokenizer.encode_speech(ref_bundle)
        ref_grid = np.stack([ref_pair.semantic, ref_pair.acoustic], axis=1)
    layers = pipe.ar.cfg.layers_per_stream
    gen = pipe.ar.generate(text_ids, ref_grid[:, :, :layers], rng=rng.spawn("ar"),
                           top_k=top_k, temperature=temperature, max_frames=max_frames)
    n_frames = gen.n_frames
    metadata = {
        "seed": int(seed),
        "n_text_ids": int(len(text_ids)),
        "n_ref_frames": int(ref_grid.shape[0]),
        "n_frames": int(n_frames),
        "terminated": bool(gen.terminated),
        "truncated": bool(gen.truncated),
        "top_k": int(top_k if top_k is not None else pipe.ar.cfg.top_k),
        "temperature": float(temperature if temperature is not None else pipe.ar.cfg.temperature),
        "flow_steps": int(flow_steps if flow_steps is not None else cfg.flow.default_steps),
    }
    if n_frames == 0:
        mel = np.zeros((0, cfg.data.mel_bins), dtype=np.float32)
        return InferenceResult(tokens=None, mel=mel, metadata=metadata)
    if pipe.nar is not None:
        grid = pipe.nar.complete_tokens(gen.tokens[:, :, 0], ref_grid)
    else:
        grid = gen.tokens    # the AR heads already emitted every layer
    if cfg.ablation.parallel_streams:
        tokens = ParallelTokens(semantic=grid[:, 0, :], acoustic=grid[:, 1, :])
        features = pipe.tokenizer.decode_tokens(tokens)
    else:
        tokens = None
        features = pipe.tokenizer.decode_tokens({"merged": grid[:, 0, :]})
    solver = SolverConfig(n_steps=metadata["flow_steps"], seed=0)
    mel = sample_mel(pipe.flow, features, cond, solver, rng.spawn("flow"))
    return InferenceResult(tokens=tokens, mel=mel, metadata=metadata)


def write_mel_file(path, result: InferenceResult) -> None:
    """Persist the sampled mel in the standard feature container."""
    arrays = {"mel": result.mel.astype(np.float32)}
    if result.tokens is not None:
        arrays["semantic_tokens"] = result.tokens.semantic.astype(np.float32)
        arrays["acoustic_tokens"] = result.tokens.acoustic.astype(np.float32)
    save_arrays(path, arrays)
