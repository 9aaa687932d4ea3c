"""Residual vector quantization with EMA codebook learning.

Each layer greedily picks the nearest codeword (squared euclidean,
ties to the lowest index) for the running residual and subtracts it;
tokens are the per-layer indices. Codebooks learn by exponential
moving averages of assigned residuals; a commitment term is reported
for any upstream encoder, whose gradients pass through the quantizer
unchanged (straight-through).

By default index 0 of every layer is pinned to the zero vector and
never updated or re-seeded. A zero codeword is the "add nothing"
option, which makes per-layer residual norms non-increasing: the
chosen codeword is at least as close as zero is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Rng, Tensor

_CHUNK = 512  # frames per distance block, bounds T*K*D scratch memory


@dataclass
class Codebook:
    entries: np.ndarray                 # (K, D) f32
    ema_counts: np.ndarray              # (K,)
    ema_sums: np.ndarray                # (K, D)
    unused_steps: np.ndarray            # (K,) int64, consecutive steps unselected
    pinned_zero: bool = True

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def _nearest(entries: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Index of the closest entry per frame; squared euclidean, lowest
    index wins ties. Distances are direct squared differences so an
    exhaustive per-frame search reproduces them bit for bit."""
    idx = np.empty(frames.shape[0], dtype=np.int64)
    for lo in range(0, frames.shape[0], _CHUNK):
        block = frames[lo:lo + _CHUNK]
        d = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
        idx[lo:lo + _CHUNK] = d.argmin(axis=1)
    return idx


@dataclass
class RVQStack:
    """A fixed number of residual quantization layers over one stream."""

    layers: list[Codebook]
    ema_decay: float = 0.99
    commitment_weight: float = 0.25
    reseed_after: int = 100
    laplace_eps: float = 1e-5
    step_count: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def codebook_size(self) -> int:
        return self.layers[0].size

    @classmethod
    def init_random(cls, rng: Rng, n_layers: int, codebook_size: int, dim: int,
                    scale: float = 1.0, pin_zero: bool = True, **kwargs) -> "RVQStack":
        layers = []
        for l in range(n_layers):
            entries = rng.spawn(("layer", l)).normal((codebook_size, dim), scale=scale, dtype=np.float32)
            if pin_zero:
                entries[0] = 0.0
            layers.append(Codebook(
                entries=entries,
                ema_counts=np.zeros(codebook_size, dtype=np.float32),
                ema_sums=np.zeros((codebook_size, dim), dtype=np.float32),
                unused_steps=np.zeros(codebook_size, dtype=np.int64),
                pinned_zero=pin_zero,
            ))
        return cls(layers=layers, **kwargs)

    # ---- core ops -----------------------------------------------------

    def _check_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise ValueError(f"expected frames of shape (T, {self.dim}), got {frames.shape}")
        return frames

    def encode(self, frames: np.ndarray):
        """Greedy layer-by-layer quantization.

        Returns (tokens (T, L) int64, quantized (T, D), residual_norms
        (T, L)) where residual_norms[t, l] is the euclidean norm of the
        residual after layer l's codeword is subtracted.
        """
        frames = self._check_frames(frames)
        t = frames.shape[0]
        tokens = np.empty((t, self.n_layers), dtype=np.int64)
        norms = np.empty((t, self.n_layers), dtype=frames.dtype)
        resid = frames.copy()
        quantized = np.zeros_like(frames)
        for l, cb in enumerate(self.layers):
            idx = _nearest(cb.entries.astype(frames.dtype, copy=False), resid)
            chosen = cb.entries[idx].astype(frames.dtype, copy=False)
            tokens[:, l] = idx
            resid = resid - chosen
            quantized = quantized + chosen
            norms[:, l] = np.sqrt((resid * resid).sum(axis=1))
        return tokens, quantized, norms

    def decode(self, tokens: np.ndarray, up_to_layer: int | None = None) -> np.ndarray:
        """Sum codewords for layers 1..up_to_layer (default: all)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.n_layers:
            raise ValueError(f"expected tokens of shape (T, {self.n_layers}), got {tokens.shape}")
        upper = self.n_layers if up_to_layer is None else up_to_layer
        if not 1 <= upper <= self.n_layers:
            raise ValueError(f"up_to_layer must be in [1, {self.n_layers}], got {up_to_layer}")
        out = np.zeros((tokens.shape[0], self.dim), dtype=np.float32)
        for l in range(upper):
            cb = self.layers[l]
            idx = tokens[:, l]
            if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
                raise ValueError(f"layer {l + 1} token out of range [0, {cb.size}): "
                                 f"min={idx.min()}, max={idx.max()}")
            out += cb.entries[idx]
        return out

    def quantize_st(self, x: Tensor):
        """Quantize a Tensor with a straight-through gradient.

        The output's value is decode(encode(x)) but gradients flow to x
        as identity. Finite differences on this path measure the true
        (piecewise-constant) quantizer and will disagree with the
        straight-through gradient; that mismatch is by design.
        """
        tokens, quantized, _ = self.encode(x.data)
        return x + Tensor(quantized - x.data), tokens

    # ---- training -------------------------------------------------------

    def train_step(self, frames: np.ndarray, rng: Rng) -> dict:
        """One EMA update from a batch of frames; mutates the stack.

        Returns reconstruction MSE (against the full quantization),
        the commitment value 0.25 * ||x - q(x)||^2 (a signal for any
        upstream encoder; codebooks themselves learn only via EMA),
        and how many dead entries were re-seeded.
        """
        frames = self._check_frames(np.asarray(frames, dtype=np.float32))
        decay = self.ema_decay
        resid = frames.copy()
        n_reseeded = 0
        for cb in self.layers:
            idx = _nearest(cb.entries, resid)
            chosen = cb.entries[idx].copy()
            counts = np.bincount(idx, minlength=cb.size).astype(np.float32)
            sums = np.zeros_like(cb.ema_sums)
            np.add.at(sums, idx, resid)
            cb.ema_counts = decay * cb.ema_counts + (1 - decay) * counts
            cb.ema_sums = decay * cb.ema_sums + (1 - decay) * sums
            # Move only entries with EMA mass; untouched entries keep their
            # init until they are eventually declared dead and re-seeded.
            n = cb.ema_counts.sum()
            smoothed = (cb.ema_counts + self.laplace_eps) / (n + cb.size * self.laplace_eps) * n
            active = cb.ema_counts > 1e-3
            if cb.pinned_zero:
                active[0] = False
            cb.entries[active] = cb.ema_sums[active] / smoothed[active, None]
            # dead-code bookkeeping
            start = 1 if cb.pinned_zero else 0
            used = counts > 0
            cb.unused_steps[used] = 0
            cb.unused_steps[~used] += 1
            dead = np.flatnonzero(cb.unused_steps[start:] >= self.reseed_after) + start
            if dead.size:
                picks = rng.choice(frames.shape[0], size=dead.size, replace=True)
                cb.entries[dead] = resid[picks]
                cb.ema_counts[dead] = 1.0
                cb.ema_sums[dead] = resid[picks]
                cb.unused_steps[dead] = 0
                n_reseeded += int(dead.size)
            resid = resid - chosen
        self.step_count += 1
        recon_mse = float((resid ** 2).mean())
        commitment = self.commitment_weight * recon_mse
        return {"recon_mse": recon_mse, "commitment": commitment, "n_reseeded": n_reseeded}

    # ---- diagnostics ------------------------------------------------------

    def utilization(self, frames: np.ndarray) -> list[float]:
        """Fraction of entries each layer selects at least once on `frames`."""
        tokens, _, _ = self.encode(self._check_frames(frames))
        return [float(len(np.unique(tokens[:, l])) / cb.size) for l, cb in enumerate(self.layers)]

    def perplexity(self, frames: np.ndarray) -> list[float]:
        """exp(entropy) of each layer's empirical token distribution."""
        tokens, _, _ = self.encode(self._check_frames(frames))
        out = []
        for l, cb in enumerate(self.layers):
            p = np.bincount(tokens[:, l], minlength=cb.size).astype(np.float64)
            p /= p.sum()
            nz = p[p > 0]
            out.append(float(np.exp(-(nz * np.log(nz)).sum())))
        return out

    # ---- state ------------------------------------------------------------

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for l, cb in enumerate(self.layers):
            out[f"{prefix}layer{l}.entries"] = cb.entries
            out[f"{prefix}layer{l}.ema_counts"] = cb.ema_counts
            out[f"{prefix}layer{l}.ema_sums"] = cb.ema_sums
            out[f"{prefix}layer{l}.unused_steps"] = cb.unused_steps
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for l, cb in enumerate(self.layers):
            for attr, key in (("entries", "entries"), ("ema_counts", "ema_counts"),
                              ("ema_sums", "ema_sums"), ("unused_steps", "unused_steps")):
                full = f"{prefix}layer{l}.{key}"
                if full not in state:
                    raise KeyError(f"codebook state missing {full!r}")
                arr = np.asarray(state[full])
                if arr.shape != getattr(cb, attr).shape:
                    raise ValueError(f"{full!r}: shape {arr.shape} != {getattr(cb, attr).shape}")
                setattr(cb, attr, arr.astype(getattr(cb, attr).dtype, copy=True))
