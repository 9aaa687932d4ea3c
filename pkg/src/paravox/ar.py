"""Dual-stream autoregressive generator over top-layer token pairs.

One decoder-only transformer consumes [text, reference speech, target
speech] with causal attention. Text has its own learned positions;
reference and target share one speech position table and one embedding
space per stream (a speech frame's input embedding is the sum of its
per-stream token embeddings). The final state at each step is split
into per-stream halves feeding independent classifier heads, while a
stop head reads the full state: end-of-speech is a stop event, not a
vocabulary entry.

The same machinery covers two ablations: a single merged stream (one
head over the full state) and multi-layer heads that predict every
quantizer layer at once so the refiner stage can be skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Rng, Tensor, bce_with_logits, concat, cross_entropy, no_grad
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock, causal_mask, padding_mask


@dataclass
class ARConfig:
    text_vocab: int = 35
    streams: tuple = (("semantic", 64), ("acoustic", 64))
    layers_per_stream: int = 1
    n_layers: int = 4
    model_dim: int = 128
    n_heads: int = 4
    max_text_len: int = 32
    max_speech_len: int = 160
    top_k: int = 8
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("text_vocab", "layers_per_stream", "n_layers", "model_dim",
                     "n_heads", "max_text_len", "max_speech_len", "top_k"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"ARConfig.{name} must be a positive int, got {v!r}")
        if not self.streams or not all(len(s) == 2 and s[1] > 0 for s in self.streams):
            raise ValueError(f"ARConfig.streams must be ((name, vocab), ...), got {self.streams!r}")
        if self.model_dim % len(self.streams):
            raise ValueError(f"model_dim {self.model_dim} must divide evenly across {len(self.streams)} streams")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def slice_dim(self) -> int:
        return self.model_dim // len(self.streams)


@dataclass
class Assembly:
    """One assembled input sequence: text, then reference, then target."""

    emb: Tensor
    n_text: int
    n_ref: int
    n_target: int

    @property
    def total(self) -> int:
        return self.n_text + self.n_ref + self.n_target

    @property
    def boundary(self) -> int:
        """Index of the state that predicts the first target frame."""
        return self.n_text + self.n_ref - 1


@dataclass
class GenerationResult:
    tokens: np.ndarray          # (T, n_streams, layers_per_stream) int64
    terminated: bool            # stop head fired
    truncated: bool             # hit max_speech_len instead

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    def stream(self, index: int) -> np.ndarray:
        return self.tokens[:, index, :]


class DualStreamAR(Module):
    def __init__(self, cfg: ARConfig, rng: Rng | None = None, dtype=None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or Rng(cfg.seed)
        d = cfg.model_dim
        self.text_emb = Embedding(cfg.text_vocab, d, rng.spawn("text_emb"), dtype=dtype)
        self.text_pos = Embedding(cfg.max_text_len, d, rng.spawn("text_pos"), dtype=dtype)
        self.speech_pos = Embedding(cfg.max_speech_len, d, rng.spawn("speech_pos"), dtype=dtype)
        self.token_embs = [Embedding(k, d, rng.spawn(("tok", s, l)), dtype=dtype)
                           for s, (_, k) in enumerate(cfg.streams)
                           for l in range(cfg.layers_per_stream)]
        self.blocks = [TransformerBlock(d, cfg.n_heads, rng.spawn(("blk", i)), dtype=dtype)
                       for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, dtype=dtype)
        self.heads = [Linear(cfg.slice_dim, k, rng.spawn(("head", s, l)), dtype=dtype)
                      for s, (_, k) in enumerate(cfg.streams)
                      for l in range(cfg.layers_per_stream)]
        self.stop_head = Linear(d, 1, rng.spawn("stop"), dtype=dtype)

    # ---- assembly -------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray, what: str) -> np.ndarray:
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        want = (cfg.n_streams, cfg.layers_per_stream)
        if tokens.ndim != 3 or tokens.shape[1:] != want:
            raise ValueError(f"{what} tokens must be (T, {want[0]}, {want[1]}), got {tokens.shape}")
        for s, (name, k) in enumerate(cfg.streams):
            col = tokens[:, s, :]
            if col.size and (col.min() < 0 or col.max() >= k):
                raise ValueError(f"{what} {name} tokens out of range [0, {k})")
        return tokens

    def _frame_embeddings(self, tokens: np.ndarray, pos_offset: int = 0) -> Tensor:
        cfg = self.cfg
        t = tokens.shape[0]
        if pos_offset + t > cfg.max_speech_len:
            raise ValueError(f"speech length {pos_offset + t} exceeds max_speech_len={cfg.max_speech_len}")
        out = self.speech_pos(np.arange(pos_offset, pos_offset + t))
        for s in range(cfg.n_streams):
            for l in range(cfg.layers_per_stream):
                out = out + self.token_embs[s * cfg.layers_per_stream + l](tokens[:, s, l])
        return out

    def assemble(self, text_ids: np.ndarray, ref_tokens: np.ndarray,
                 tgt_tokens: np.ndarray | None = None) -> Assembly:
        """Text embeddings, then reference frames, then target frames.

        Reference and target use one continuous run of speech positions;
        an empty reference (zero frames) is allowed for unconditional
        generation.
        """
        cfg = self.cfg
        text_ids = np.asarray(text_ids, dtype=np.int64)
        if text_ids.ndim != 1 or text_ids.size == 0:
            raise ValueError(f"text_ids must be a non-empty 1-D id array, got shape {text_ids.shape}")
        if text_ids.size > cfg.max_text_len:
            raise ValueError(f"text length {text_ids.size} exceeds max_text_len={cfg.max_text_len}")
        if text_ids.min() < 0 or text_ids.max() >= cfg.text_vocab:
            raise ValueError(f"text ids out of range [0, {cfg.text_vocab})")
        ref = self._check_tokens(ref_tokens, "reference") if np.asarray(ref_tokens).size \
            else np.zeros((0, cfg.n_streams, cfg.layers_per_stream), dtype=np.int64)
        parts = [self.text_emb(text_ids) + self.text_pos(np.arange(text_ids.size))]
        if ref.shape[0]:
            parts.append(self._frame_embeddings(ref))
        n_target = 0
        if tgt_tokens is not None and np.asarray(tgt_tokens).size:
            tgt = self._check_tokens(tgt_tokens, "target")
            n_target = tgt.shape[0]
            parts.append(self._frame_embeddings(tgt, pos_offset=ref.shape[0]))
        emb = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        return Assembly(emb=emb, n_text=text_ids.size, n_ref=ref.shape[0], n_target=n_target)

    # ---- trunk ------------------------------------------------------------

    def forward_states(self, emb: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Run the causal trunk; emb is (L, D) or (B, L, D)."""
        t = emb.shape[-2]
        if mask is None:
            mask = causal_mask(t, dtype=emb.dtype)
        h = emb
        for block in self.blocks:
            h = block(h, mask=mask)
        return self.ln_f(h)

    def _head_logits(self, states: Tensor, s: int, l: int) -> Tensor:
        cfg = self.cfg
        lo = s * cfg.slice_dim
        sl = states[..., lo:lo + cfg.slice_dim] if cfg.n_streams > 1 else states
        return self.heads[s * cfg.layers_per_stream + l](sl)

    def forward_teacher_forced(self, text_ids, ref_tokens, tgt_tokens):
        """Logits for every target step of one utterance.

        Returns (stream_logits, stop_logits): `stream_logits[s][l]` is
        (T, K_s) where row t is predicted from the state just before
        target frame t; `stop_logits` is (T + 1,), one entry per state
        from the prompt boundary through the last target frame, whose
        label is 1 only at the final frame.
        """
        tgt = self._check_tokens(tgt_tokens, "target")
        if tgt.shape[0] == 0:
            raise ValueError("teacher forcing needs at least one target frame")
        asm = self.assemble(text_ids, ref_tokens, tgt)
        states = self.forward_states(asm.emb)
        b, t = asm.boundary, asm.n_target
        pred_states = states[b:b + t]
        stop_states = states[b:b + t + 1]
        stream_logits = [[self._head_logits(pred_states, s, l) for l in range(self.cfg.layers_per_stream)]
                         for s in range(self.cfg.n_streams)]
        stop_logits = self.stop_head(stop_states).reshape(-1)
        return stream_logits, stop_logits

    # ---- batched training path ---------------------------------------------

    def batch_states(self, assemblies: list[Assembly]):
        """Pad a batch of assemblies and run the trunk once.

        Returns (states (B, Lmax, D), lengths). Padded positions are
        blocked as attention targets and must be excluded from losses.
        """
        lengths = np.array([a.total for a in assemblies])
        l_max = int(lengths.max())
        dtype = assemblies[0].emb.dtype
        rows = []
        for a in assemblies:
            pad = l_max - a.total
            e = a.emb.reshape(1, a.total, -1)
            if pad:
                zeros = Tensor(np.zeros((1, pad, e.shape[-1]), dtype=dtype))
                e = concat([e, zeros], axis=1)
            rows.append(e)
        emb = concat(rows, axis=0)
        mask = causal_mask(l_max, dtype=np.float64 if dtype == np.float64 else np.float32)
        mask = mask[None, None] + padding_mask(lengths, l_max, dtype=mask.dtype)
        return self.forward_states(emb, mask=mask), lengths

    def teacher_forced_batch(self, batch: list[tuple]):
        """Flatten teacher-forced logits over a batch.

        `batch` rows are (text_ids, ref_tokens, tgt_tokens). Returns
        (stream_logits, stream_targets, stop_logits, stop_labels) with
        per-(stream, layer) logits stacked over all real target steps,
        ready for `ar_loss`.
        """
        cfg = self.cfg
        assemblies, targets = [], []
        for text_ids, ref_tokens, tgt_tokens in batch:
            tgt = self._check_tokens(tgt_tokens, "target")
            if tgt.shape[0] == 0:
                raise ValueError("teacher forcing needs at least one target frame")
            assemblies.append(self.assemble(text_ids, ref_tokens, tgt))
            targets.append(tgt)
        states, _ = self.batch_states(assemblies)
        pred_rows, stop_rows, stop_labels = [], [], []
        for i, (asm, tgt) in enumerate(zip(assemblies, targets)):
            b, t = asm.boundary, asm.n_target
            pred_rows.append(states[i, b:b + t])
            stop_rows.append(states[i, b:b + t + 1])
            lab = np.zeros(t + 1, dtype=np.float64)
            lab[-1] = 1.0
            stop_labels.append(lab)
        pred = concat(pred_rows, axis=0)
        stops = concat(stop_rows, axis=0)
        stream_logits = [[self._head_logits(pred, s, l) for l in range(cfg.layers_per_stream)]
                         for s in range(cfg.n_streams)]
        stream_targets = [[np.concatenate([tgt[:, s, l] for tgt in targets])
                           for l in range(cfg.layers_per_stream)]
                          for s in range(cfg.n_streams)]
        stop_logits = self.stop_head(stops).reshape(-1)
        return stream_logits, stream_targets, stop_logits, np.concatenate(stop_labels)

    def ar_loss(self, stream_logits, stream_targets, stop_logits, stop_labels) -> dict:
        """Per-stream cross-entropies plus the stop BCE.

        Each stream's term is the mean per-step cross-entropy (averaged
        over its prediction heads); `total` is the exact sum of the
        per-stream terms and `L_stop`. Uniform logits over K classes
        give a stream term of ln K.
        """
        out = {}
        parts = []
        for s, (name, _) in enumerate(self.cfg.streams):
            ces = [cross_entropy(stream_logits[s][l], stream_targets[s][l])
                   for l in range(self.cfg.layers_per_stream)]
            term = ces[0] if len(ces) == 1 else sum(ces[1:], ces[0]) * (1.0 / len(ces))
            out[f"L_{name}"] = term
            parts.append(term)
        stop = bce_with_logits(stop_logits, np.asarray(stop_labels, dtype=stop_logits.dtype))
        out["L_stop"] = stop
        parts.append(stop)
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        out["total"] = total
        return out

    def teacher_forced_accuracy(self, batch: list[tuple]) -> dict[str, float]:
        """Fraction of argmax-correct predictions per stream (all heads)."""
        with no_grad():
            stream_logits, stream_targets, _, _ = self.teacher_forced_batch(batch)
        out = {}
        for s, (name, _) in enumerate(self.cfg.streams):
            correct = total = 0
            for l in range(self.cfg.layers_per_stream):
                pred = stream_logits[s][l].data.argmax(axis=-1)
                correct += int((pred == stream_targets[s][l]).sum())
                total += pred.shape[0]
            out[name] = correct / total
        return out

    # ---- sampling --------------------------------------------------------

    def _sample_head(self, logits: np.ndarray, top_k: int, temperature: float, rng: Rng) -> int:
        k = min(top_k, logits.shape[-1])
        # Descending by logit, ties to the lowest index, so k=1 is argmax.
        order = np.lexsort((np.arange(logits.shape[-1]), -logits))
        keep = order[:k]
        z = (logits[keep] - logits[keep].max()) / temperature
        p = np.exp(z)
        p /= p.sum()
        u = rng.uniform()
        j = int(np.searchsorted(np.cumsum(p), u, side="right"))
        return int(keep[min(j, k - 1)])

    def generate(self, text_ids, ref_tokens, rng: Rng | None = None, seed: int = 0,
                 top_k: int | None = None, temperature: float | None = None,
                 max_frames: int | None = None) -> GenerationResult:
        """Sample token frames until the stop head fires or length runs out.

        Each iteration re-runs the trunk on the assembly so far, checks
        P(stop) at the last state (so a saturated stop head yields an
        empty, terminated result), then draws one token per stream and
        head from the renormalized top-k distribution.
        """
        cfg = self.cfg
        rng = rng or Rng(seed)
        top_k = cfg.top_k if top_k is None else top_k
        temperature = cfg.temperature if temperature is None else temperature
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        ref = np.asarray(ref_tokens) if np.asarray(ref_tokens).size \
            else np.zeros((0, cfg.n_streams, cfg.layers_per_stream), dtype=np.int64)
        limit = max_frames if max_frames is not None else cfg.max_speech_len - ref.shape[0]
        frames = np.zeros((0, cfg.n_streams, cfg.layers_per_stream), dtype=np.int64)
        terminated = truncated = False
        with no_grad():
            while True:
                asm = self.assemble(text_ids, ref, frames if frames.shape[0] else None)
                states = self.forward_states(asm.emb)
                last = states[asm.total - 1:asm.total]
                stop_p = float(self.stop_head(last).sigmoid().data.reshape(()))
                if stop_p > 0.5:
                    terminated = True
                    break
                if frames.shape[0] >= limit:
                    truncated = True
                    break
                step = np.empty((1, cfg.n_streams, cfg.layers_per_stream), dtype=np.int64)
                for s in range(cfg.n_streams):
                    for l in range(cfg.layers_per_stream):
                        logits = self._head_logits(last, s, l).data.reshape(-1)
                        step[0, s, l] = self._sample_head(logits, top_k, temperature, rng)
                frames = np.concatenate([frames, step], axis=0)
        return GenerationResult(tokens=frames, terminated=terminated, truncated=truncated)


def tokens_from_parallel(parallel_tokens, layers: int = 1) -> np.ndarray:
    """(T, 2, layers) AR input from a ParallelTokens pair (top layers first)."""
    sem = parallel_tokens.semantic[:, :layers]
    ac = parallel_tokens.acoustic[:, :layers]
    return np.stack([sem, ac], axis=1).astype(np.int64)
