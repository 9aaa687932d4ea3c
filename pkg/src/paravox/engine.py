"""Dense-tensor reverse-mode autodiff on numpy, plus seeded randomness.

A `Tensor` wraps one contiguous float array (float32 for training,
float64 for gradient checking). Every differentiable op records a
closure on the output node; `backward()` walks the tape in reverse
topological order and accumulates gradients into `.grad`.

Randomness goes through `Rng`, a thin wrapper over numpy's Philox
counter-based bit generator, so that a fixed seed gives the same
stream on every platform and named substreams stay reproducible.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "Rng",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "concat",
    "embedding",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "bce_with_logits",
    "gradients",
    "zero_grad",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording (inference / finite-difference evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # ---- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or not g.flags.owndata else g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Populates `.grad` on every tensor on the tape. Parameters that
        never entered the graph keep `grad is None`; `gradients()` maps
        that to an explicit zero array.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # ---- op plumbing -------------------------------------------------

    @staticmethod
    def _lift(other, dtype) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    @staticmethod
    def _make(data, parents, grad_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        return out

    # ---- arithmetic --------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast shapes {self.data.shape} and {other.data.shape}") from None

        def grad_fn(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor._make(data, (self, other), grad_fn)

    __radd__ = __add__

    def __neg__(self):
        def grad_fn(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), grad_fn)

    def __sub__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        try:
            data = self.data - other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast shapes {self.data.shape} and {other.data.shape}") from None

        def grad_fn(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(-g)

        return Tensor._make(data, (self, other), grad_fn)

    def __rsub__(self, other):
        return Tensor._lift(other, self.data.dtype) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast shapes {self.data.shape} and {other.data.shape}") from None

        def grad_fn(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        return Tensor._make(data, (self, other), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self.data.dtype)
        try:
            data = self.data / other.data
        except ValueError:
            raise ShapeError(f"cannot broadcast shapes {self.data.shape} and {other.data.shape}") from None

        def grad_fn(g):
            if self.requires_grad:
                self._accumulate(g / other.data)
            if other.requires_grad:
                other._accumulate(-g * self.data / (other.data * other.data))

        return Tensor._make(data, (self, other), grad_fn)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self.data.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** p

        def grad_fn(g):
            self._accumulate(g * p * self.data ** (p - 1))

        return Tensor._make(data, (self,), grad_fn)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor._lift(other, self.data.dtype)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
        try:
            data = np.matmul(a, b)
        except ValueError:
            raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} vs {b.shape}") from None

        def grad_fn(g):
            if self.requires_grad:
                self._accumulate(np.matmul(g, b.swapaxes(-1, -2)))
            if other.requires_grad:
                other._accumulate(np.matmul(a.swapaxes(-1, -2), g))

        return Tensor._make(data, (self, other), grad_fn)

    # ---- elementwise nonlinearities -----------------------------------

    def exp(self):
        data = np.exp(self.data)

        def grad_fn(g):
            self._accumulate(g * data)

        return Tensor._make(data, (self,), grad_fn)

    def log(self):
        def grad_fn(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), grad_fn)

    def sqrt(self):
        data = np.sqrt(self.data)

        def grad_fn(g):
            self._accumulate(g * 0.5 / data)

        return Tensor._make(data, (self,), grad_fn)

    def tanh(self):
        data = np.tanh(self.data)

        def grad_fn(g):
            self._accumulate(g * (1.0 - data * data))

        return Tensor._make(data, (self,), grad_fn)

    def sigmoid(self):
        x = self.data
        data = np.empty_like(x)
        pos = x >= 0
        data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        data[~pos] = ex / (1.0 + ex)

        def grad_fn(g):
            self._accumulate(g * data * (1.0 - data))

        return Tensor._make(data, (self,), grad_fn)

    def relu(self):
        data = np.maximum(self.data, 0)

        def grad_fn(g):
            self._accumulate(g * (self.data > 0))

        return Tensor._make(data, (self,), grad_fn)

    # ---- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor._make(data, (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        data = self.data.reshape(shape)

        def grad_fn(g):
            self._accumulate(g.reshape(orig))

        return Tensor._make(data, (self,), grad_fn)

    def swapaxes(self, ax1, ax2):
        data = self.data.swapaxes(ax1, ax2)

        def grad_fn(g):
            self._accumulate(g.swapaxes(ax1, ax2))

        return Tensor._make(data, (self,), grad_fn)

    def __getitem__(self, idx):
        data = self.data[idx]

        def grad_fn(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            self._accumulate(full)

        return Tensor._make(data, (self,), grad_fn)


# ---- free functions -----------------------------------------------------


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(data, tuple(tensors), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather `table[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.data.shape[0]}): min={ids.min()}, max={ids.max()}")
    data = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(full)

    return Tensor._make(data, (table,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - inner))

    return Tensor._make(data, (x,), grad_fn)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance.

    A constant row has zero variance and normalizes to exact zeros
    (the centered numerator vanishes before the eps-guarded divide).
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    data = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * data).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - data * gy))

    return Tensor._make(data, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under `logits`.

    `logits` has classes on the last axis; leading axes are flattened.
    `mask` (same leading shape, 0/1) selects which positions count; the
    mean is over selected positions. Uniform logits give exactly ln K.
    """
    k = logits.data.shape[-1]
    flat = logits.data.reshape(-1, k)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy targets shape {np.asarray(targets).shape} does not match logits {logits.data.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"cross_entropy targets out of range [0, {k})")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = (lse.reshape(-1) - z[np.arange(t.shape[0]), t])
    if mask is not None:
        w = np.asarray(mask, dtype=flat.dtype).reshape(-1)
        denom = w.sum()
        if denom <= 0:
            raise ValueError("cross_entropy mask selects no positions")
        loss = (nll * w).sum() / denom
    else:
        w = None
        denom = float(t.shape[0])
        loss = nll.mean()

    def grad_fn(g):
        p = np.exp(z - lse)
        p[np.arange(t.shape[0]), t] -= 1.0
        if w is not None:
            p *= (w / denom)[:, None]
        else:
            p /= denom
        logits._accumulate(float(g) * p.reshape(logits.data.shape))

    return Tensor._make(np.asarray(loss, dtype=flat.dtype), (logits,), grad_fn)


def bce_with_logits(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    x = logits.data
    y = np.asarray(labels, dtype=x.dtype)
    if x.shape != y.shape:
        raise ShapeError(f"bce_with_logits labels shape {y.shape} does not match logits {x.shape}")
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    if mask is not None:
        w = np.asarray(mask, dtype=x.dtype)
        denom = w.sum()
        if denom <= 0:
            raise ValueError("bce_with_logits mask selects no positions")
        loss = (per * w).sum() / denom
    else:
        w = None
        denom = float(x.size)
        loss = per.mean()

    def grad_fn(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        d = (s - y)
        if w is not None:
            d = d * w
        logits._accumulate(float(g) * d.astype(x.dtype) / denom)

    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), grad_fn)


# ---- gradients / checking ------------------------------------------------


def zero_grad(params) -> None:
    for p in _param_list(params):
        p.grad = None


def _param_list(params):
    if isinstance(params, dict):
        return list(params.values())
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def gradients(loss: Tensor, params) -> list[np.ndarray]:
    """Run backward and return one gradient array per parameter.

    Parameters that never entered the graph get an explicit zero array.
    """
    plist = _param_list(params)
    zero_grad(plist)
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]


class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients.

    The error metric is max over coordinates of |a - n| / max(1, |a|, |n|),
    i.e. absolute for small gradients, relative for large ones. A report
    never raises; inspect `passed`.
    """

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self.entries: list[tuple[str, float, int]] = []

    def add(self, name: str, max_err: float, n_coords: int):
        self.entries.append((name, max_err, n_coords))

    @property
    def max_error(self) -> float:
        return max((e for _, e, _ in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"grad check (tolerance {self.tolerance:g}):"]
        for name, err, n in self.entries:
            mark = "ok  " if err < self.tolerance else "FAIL"
            lines.append(f"  [{mark}] {name}: max err {err:.3e} over {n} coords")
        lines.append(f"  overall: {'PASS' if self.passed else 'FAIL'} (max {self.max_error:.3e})")
        return "\n".join(lines)


def grad_check(fn, params: dict, tolerance: float = 1e-5, h: float = 1e-5,
               max_coords: int | None = None, rng: "Rng | None" = None) -> GradCheckReport:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` is a zero-argument closure over `params` (name -> Tensor) that
    rebuilds the loss graph on each call. All parameters must be float64;
    float32 rounding swamps the h=1e-5 difference quotient. When
    `max_coords` is set, a seeded random subset of coordinates is probed
    per parameter instead of every one.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {name!r} is {p.data.dtype}")
    report = GradCheckReport(tolerance)
    zero_grad(params)
    loss = fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    def eval_loss() -> float:
        with no_grad():
            return float(fn().data)

    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ValueError("max_coords needs an Rng for coordinate subsampling")
            coords = rng.generator.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[name].reshape(-1)
        max_err = 0.0
        count = 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > max_err:
                max_err = err
            count += 1
        report.add(name, max_err, count)
    return report


# ---- randomness ----------------------------------------------------------


def _mix_tag(seed: int, tag) -> int:
    """Stable 64-bit child seed from (seed, tag); not Python's hash()."""
    payload = f"{seed}:{tag!r}".encode()
    return int.from_bytes(hashlib.blake2s(payload, digest_size=8).digest(), "little")


class Rng:
    """Seeded random source backed by numpy's Philox counter-based generator.

    Identical seeds give identical streams across platforms and runs.
    `spawn(tag)` derives an independent, reproducible substream keyed by
    a string or integer tag.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, tag) -> "Rng":
        return Rng(_mix_tag(self.seed, tag))

    def normal(self, shape=(), scale: float = 1.0, dtype=None) -> np.ndarray:
        dtype = dtype or get_default_dtype()
        return (self.generator.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray | float:
        out = self.generator.uniform(low, high, size=shape)
        return float(out) if shape == () else out

    def integers(self, low: int, high: int, shape=()) -> np.ndarray | int:
        out = self.generator.integers(low, high, size=shape)
        return int(out) if shape == () else out

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation), built from primitives."""
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * ((c * (x + 0.044715 * x ** 3)).tanh() + 1.0)
