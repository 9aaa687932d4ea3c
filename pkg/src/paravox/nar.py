"""Coupled non-autoregressive refinement of the deeper quantizer layers.

The top-layer token pair fixes content and duration; what remains is
filling in quantizer layers 2..L for both streams at once. Each
refinement stage is a bidirectional transformer over [reference ||
target] that predicts exactly one layer: stage s reads target layers
1..s and reference layers 1..s+1, and emits a joint classifier over
the concatenated stream vocabularies, with one softmax per stream
slice. Both streams of a layer are predicted in a single pass, so the
acoustic evidence can shape the semantic choice and vice versa.

Inference is pure argmax — every position of a layer is decided in one
parallel step, which is what makes the refiner cheap compared to the
autoregressive stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Rng, Tensor, concat, cross_entropy, no_grad
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock, padding_mask


@dataclass
class NARConfig:
    streams: tuple = (("semantic", 64), ("acoustic", 64))
    n_quant_layers: int = 3
    n_layers: int = 2
    model_dim: int = 128
    n_heads: int = 4
    max_ref_len: int = 96
    max_target_len: int = 96
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_quant_layers", "n_layers", "model_dim", "n_heads",
                     "max_ref_len", "max_target_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"NARConfig.{name} must be a positive int, got {v!r}")
        if not self.streams or not all(len(s) == 2 and s[1] > 0 for s in self.streams):
            raise ValueError(f"NARConfig.streams must be ((name, vocab), ...), got {self.streams!r}")
        if self.n_quant_layers < 2:
            raise ValueError("refinement needs at least two quantizer layers")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def n_streams(self) -> int:
        return len(self.streams)


class CoupledStage(Module):
    """Predict quantizer layer `layer_index` for every stream at once."""

    def __init__(self, cfg: NARConfig, layer_index: int, rng: Rng, dtype=None):
        if not 1 <= layer_index < cfg.n_quant_layers:
            raise ValueError(f"layer_index must be in [1, {cfg.n_quant_layers}), got {layer_index}")
        self.cfg = cfg
        self.layer_index = layer_index
        self.n_tgt_in = layer_index           # target layers 1..s seen as input
        self.n_ref_in = layer_index + 1       # reference additionally shows layer s+1
        d = cfg.model_dim
        self.tgt_embs = [Embedding(k, d, rng.spawn(("tgt", s, l)), dtype=dtype)
                         for s, (_, k) in enumerate(cfg.streams)
                         for l in range(self.n_tgt_in)]
        self.ref_embs = [Embedding(k, d, rng.spawn(("ref", s, l)), dtype=dtype)
                         for s, (_, k) in enumerate(cfg.streams)
                         for l in range(self.n_ref_in)]
        self.segment_emb = Embedding(2, d, rng.spawn("segment"), dtype=dtype)
        self.ref_pos = Embedding(cfg.max_ref_len, d, rng.spawn("ref_pos"), dtype=dtype)
        self.tgt_pos = Embedding(cfg.max_target_len, d, rng.spawn("tgt_pos"), dtype=dtype)
        self.blocks = [TransformerBlock(d, cfg.n_heads, rng.spawn(("blk", i)), dtype=dtype)
                       for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, dtype=dtype)
        self.classifier = Linear(d, sum(k for _, k in cfg.streams), rng.spawn("cls"), dtype=dtype)

    # ---- input handling ---------------------------------------------------

    def _check(self, tokens, what: str, need_layers: int, max_len: int) -> np.ndarray:
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 3 or tokens.shape[1] != cfg.n_streams or tokens.shape[2] < need_layers:
            raise ValueError(f"{what} tokens must be (T, {cfg.n_streams}, >= {need_layers}), "
                             f"got {tokens.shape}")
        if tokens.shape[0] == 0:
            raise ValueError(f"{what} tokens must have at least one frame")
        if tokens.shape[0] > max_len:
            raise ValueError(f"{what} length {tokens.shape[0]} exceeds limit {max_len}")
        for s, (name, k) in enumerate(cfg.streams):
            col = tokens[:, s, :need_layers]
            if col.min() < 0 or col.max() >= k:
                raise ValueError(f"{what} {name} tokens out of range [0, {k})")
        return tokens

    def _segment_embedding(self, tokens, embs, n_layers, seg_id, pos_table) -> Tensor:
        t = tokens.shape[0]
        out = pos_table(np.arange(t)) + self.segment_emb(np.full(t, seg_id))
        for s in range(self.cfg.n_streams):
            for l in range(n_layers):
                out = out + embs[s * n_layers + l](tokens[:, s, l])
        return out

    def _assemble(self, ref_tokens, tgt_tokens) -> Tensor:
        ref = self._check(ref_tokens, "reference", self.n_ref_in, self.cfg.max_ref_len)
        tgt = self._check(tgt_tokens, "target", self.n_tgt_in, self.cfg.max_target_len)
        ref_e = self._segment_embedding(ref, self.ref_embs, self.n_ref_in, 0, self.ref_pos)
        tgt_e = self._segment_embedding(tgt, self.tgt_embs, self.n_tgt_in, 1, self.tgt_pos)
        return concat([ref_e, tgt_e], axis=0)

    # ---- forward ------------------------------------------------------------

    def forward_logits(self, ref_tokens, tgt_tokens) -> Tensor:
        """(T, sum K) joint logits for the predicted layer; attention is
        bidirectional, so every target position sees the whole sequence."""
        n_ref = np.asarray(ref_tokens).shape[0]
        emb = self._assemble(ref_tokens, tgt_tokens)
        h = emb
        for block in self.blocks:
            h = block(h)
        states = self.ln_f(h)
        return self.classifier(states[n_ref:])

    def stream_slices(self, logits: Tensor) -> list[Tensor]:
        out, lo = [], 0
        for _, k in self.cfg.streams:
            out.append(logits[..., lo:lo + k])
            lo += k
        return out

    def batch_logits(self, batch: list[tuple]) -> tuple[Tensor, int]:
        """Flattened target-position logits over a padded batch.

        `batch` rows are (ref_tokens, tgt_tokens). Padded positions are
        masked out of attention and dropped from the output.
        """
        embs = [self._assemble(r, t) for r, t in batch]
        lengths = np.array([e.shape[0] for e in embs])
        l_max = int(lengths.max())
        dtype = embs[0].dtype
        rows = []
        for e in embs:
            pad = l_max - e.shape[0]
            e = e.reshape(1, e.shape[0], -1)
            if pad:
                e = concat([e, Tensor(np.zeros((1, pad, e.shape[-1]), dtype=dtype))], axis=1)
            rows.append(e)
        stacked = concat(rows, axis=0)
        mask = padding_mask(lengths, l_max, dtype=np.float64 if dtype == np.float64 else np.float32)
        h = stacked
        for block in self.blocks:
            h = block(h, mask=mask)
        states = self.ln_f(h)
        pieces = []
        for i, (ref_tokens, tgt_tokens) in enumerate(batch):
            n_ref = np.asarray(ref_tokens).shape[0]
            pieces.append(states[i, n_ref:lengths[i]])
        return self.classifier(concat(pieces, axis=0)), l_max

    def stage_loss(self, batch: list[tuple]) -> Tensor:
        """Mean per-decision cross-entropy for this stage's layer.

        Every target position contributes one decision per stream; the
        labels come from layer `layer_index` of the target tokens, which
        the input embeddings never see.
        """
        logits, _ = self.batch_logits(batch)
        labels = []
        for _, tgt_tokens in batch:
            tgt = np.asarray(tgt_tokens, dtype=np.int64)
            if tgt.shape[2] <= self.layer_index:
                raise ValueError(f"targets need layer {self.layer_index} labels, got {tgt.shape}")
            labels.append(tgt[:, :, self.layer_index])
        lab = np.concatenate(labels, axis=0)      # (N, n_streams)
        slices = self.stream_slices(logits)
        ces = [cross_entropy(slices[s], lab[:, s]) for s in range(self.cfg.n_streams)]
        total = ces[0]
        for c in ces[1:]:
            total = total + c
        return total * (1.0 / len(ces))

    def predict(self, ref_tokens, tgt_tokens) -> np.ndarray:
        """(T, n_streams) argmax tokens for the predicted layer."""
        with no_grad():
            logits = self.forward_logits(ref_tokens, tgt_tokens)
            slices = self.stream_slices(logits)
            return np.stack([s.data.argmax(axis=-1) for s in slices], axis=1).astype(np.int64)


class CoupledNAR(Module):
    """Stage stack completing layers 2..L from the top-layer pair."""

    def __init__(self, cfg: NARConfig, rng: Rng | None = None, dtype=None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or Rng(cfg.seed)
        self.stages = [CoupledStage(cfg, layer, rng.spawn(("stage", layer)), dtype=dtype)
                       for layer in range(1, cfg.n_quant_layers)]

    def complete_tokens(self, top_tokens, ref_tokens) -> np.ndarray:
        """(T, n_streams, L) full token grid grown layer by layer.

        `top_tokens` is (T, n_streams) or (T, n_streams, 1) from the
        autoregressive stage; `ref_tokens` is the full (R, n_streams, L)
        grid encoded from the reference utterance.
        """
        top = np.asarray(top_tokens, dtype=np.int64)
        if top.ndim == 3 and top.shape[2] == 1:
            top = top[:, :, 0]
        if top.ndim != 2 or top.shape[1] != self.cfg.n_streams:
            raise ValueError(f"top tokens must be (T, {self.cfg.n_streams}), got {top.shape}")
        grid = top[:, :, None]
        for stage in self.stages:
            nxt = stage.predict(ref_tokens, grid)
            grid = np.concatenate([grid, nxt[:, :, None]], axis=2)
        return grid

    def nar_loss(self, batch: list[tuple]) -> dict:
        """Stage losses plus their exact sum.

        `batch` rows are (ref_tokens, tgt_tokens) with full (.., L)
        grids; stage s trains on its own input/label slice of the same
        batch. Keys are L_second, L_third, ... in layer order.
        """
        names = ["L_second", "L_third", "L_fourth", "L_fifth"]
        out = {}
        parts = []
        for i, stage in enumerate(self.stages):
            key = names[i] if i < len(names) else f"L_layer{stage.layer_index + 1}"
            term = stage.stage_loss(batch)
            out[key] = term
            parts.append(term)
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        out["total"] = total
        return out

    def stage_accuracy(self, batch: list[tuple]) -> dict[str, float]:
        """Per-stage fraction of exactly right argmax predictions."""
        out = {}
        for stage in self.stages:
            correct = total = 0
            for ref_tokens, tgt_tokens in batch:
                tgt = np.asarray(tgt_tokens, dtype=np.int64)
                pred = stage.predict(ref_tokens, tgt)
                correct += int((pred == tgt[:, :, stage.layer_index]).sum())
                total += pred.size
            out[f"layer{stage.layer_index + 1}"] = correct / total
        return out
