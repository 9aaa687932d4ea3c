"""Neural-net layers on top of the autodiff engine.

A `Module` collects parameters from its attributes (Tensors, child
Modules, lists of Modules) under dotted names, which is what the
checkpoint format stores. Layers accept inputs of rank 2 (T, D) or
rank 3 (B, T, D); attention masks are additive numpy constants.
"""

from __future__ import annotations

import numpy as np

from .engine import Rng, Tensor, concat, embedding, gelu, layer_norm, softmax

NEG_MASK = -1e9  # additive attention mask; exp underflows to exactly 0


class Module:
    """Base class: parameter discovery, state (de)serialization, dtype cast."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, scale: float | None = None, dtype=None):
        scale = scale if scale is not None else 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.normal((d_in, d_out), scale=scale, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=self.weight.dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: Rng, scale: float = 0.05, dtype=None):
        self.weight = Tensor(rng.normal((n_rows, dim), scale=scale, dtype=dtype), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=None):
        dtype = dtype or np.float32
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x) * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention with an additive mask."""

    def __init__(self, dim: int, n_heads: int, rng: Rng, dtype=None):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(dim, dim, rng.spawn("wq"), dtype=dtype)
        self.wk = Linear(dim, dim, rng.spawn("wk"), dtype=dtype)
        self.wv = Linear(dim, dim, rng.spawn("wv"), dtype=dtype)
        self.wo = Linear(dim, dim, rng.spawn("wo"), dtype=dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        shape = x.shape  # (..., T, D)
        t, d = shape[-2], shape[-1]
        q, k, v = self.wq(x), self.wk(x), self.wv(x)

        def split(h: Tensor) -> Tensor:
            return h.reshape(shape[:-1] + (self.n_heads, self.head_dim)).swapaxes(-3, -2)

        q, k, v = split(q), split(k), split(v)  # (..., H, T, hd)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + Tensor(np.asarray(mask, dtype=scores.dtype))
        att = softmax(scores, axis=-1)
        out = (att @ v).swapaxes(-3, -2).reshape(shape[:-1] + (d,))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, dim: int, n_heads: int, rng: Rng, mlp_ratio: int = 4, dtype=None):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng.spawn("attn"), dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng.spawn("fc1"), dtype=dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng.spawn("fc2"), dtype=dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        x = x + self.fc2(gelu(self.fc1(self.ln2(x))))
        return x


class Conv1dSame(Module):
    """1-D convolution over time with zero padding, via shifted-slice concat."""

    def __init__(self, d_in: int, d_out: int, kernel: int, rng: Rng, dtype=None):
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same-padding")
        self.kernel = kernel
        self.proj = Linear(kernel * d_in, d_out, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        t, d = x.shape[-2], x.shape[-1]
        half = self.kernel // 2
        pad_shape = x.shape[:-2] + (half, d)
        zeros = Tensor(np.zeros(pad_shape, dtype=x.dtype))
        padded = concat([zeros, x, zeros], axis=-2)
        windows = concat([padded[..., i:i + t, :] for i in range(self.kernel)], axis=-1)
        return self.proj(windows)


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """(t, t) additive mask: 0 on/below the diagonal, NEG_MASK above."""
    m = np.full((t, t), NEG_MASK, dtype=dtype)
    return np.triu(m, k=1)


def padding_mask(lengths: np.ndarray, t: int, dtype=np.float32) -> np.ndarray:
    """(B, 1, 1, t) additive mask blocking attention to padded columns."""
    lengths = np.asarray(lengths)
    cols = np.arange(t)[None, :] >= lengths[:, None]
    return np.where(cols, NEG_MASK, 0.0).astype(dtype)[:, None, None, :]


def sinusoid_table(n_positions: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position table (n_positions, dim)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def mse(a: Tensor, b) -> Tensor:
    diff = a - (b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype)))
    return (diff * diff).mean()
