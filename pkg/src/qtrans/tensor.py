"""Minimal dense-tensor engine with reverse-mode autodiff.

Values are numpy arrays (float32 in production, float64 for gradient
checking). Every op records its parents so a backward pass can walk the
graph in reverse topological order, visiting each node exactly once.
Single-threaded and deterministic: same seed + same op sequence gives
bit-identical results.
"""

from __future__ import annotations

import zlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A forward op produced or would produce non-finite values."""


DEFAULT_DTYPE = np.float32

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class RngState:
    """Seeded PCG64 stream; identical seeds give bit-identical draws."""

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "RngState":
        """Derive an independent stream from (seed, tag); stable across runs."""
        rng = RngState.__new__(RngState)
        rng.seed = self.seed
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, zlib.crc32(tag.encode())])
        rng._gen = np.random.Generator(np.random.PCG64(seq))
        return rng

    def random(self, shape, dtype=np.float64):
        return self._gen.random(shape, dtype=dtype)

    def normal(self, shape, scale=1.0):
        return self._gen.normal(0.0, scale, shape)

    def uniform(self, low, high, shape):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


class Tensor:
    """A value in the graph: numpy data plus (optionally) a gradient.

    `op` and `parents` describe where the value came from; they drive both
    the backward pass and structural checks such as the quantized-matmul
    graph walk.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "label")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._backward = None
        self.label = None

    # -- introspection ------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this (scalar) value.

        Visits each node once in reverse topological order.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def transpose(self, axes):
        return transpose(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, op, parents, backward, label=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.label = label
    if _grad_enabled:
        out.op = op
        out.parents = tuple(parents)
        out.requires_grad = any(p.requires_grad for p in parents)
        out._backward = backward if out.requires_grad else None
    else:
        out.op = op
        out.parents = ()
        out.requires_grad = False
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise division. A zero anywhere in the denominator is a
    signaled error, never a silent inf/nan."""
    if np.any(b.data == 0):
        raise NumericError("division by zero in denominator tensor")
    inv = 1.0 / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * inv, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data * inv * inv, b.shape))

    return _node(a.data * inv, "div", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def backward(g):
        a._accum(g * s)

    return _node(a.data * s, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (..., m, k) @ (k, n) and batched operands
    with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.shape))

    return _node(out, "matmul", (a, b), backward)


# -- shape ops ---------------------------------------------------------------


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return _node(a.data.transpose(axes).copy(), "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        a._accum(g.reshape(old))

    return _node(a.data.reshape(shape), "reshape", (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward)


def split(a: Tensor, sections: int, axis: int) -> list:
    """Split into equal sections along an axis."""
    if a.data.shape[axis] % sections:
        raise ShapeError(f"axis {axis} extent {a.data.shape[axis]} not divisible by {sections}")
    pieces = np.split(a.data, sections, axis=axis)
    width = a.data.shape[axis] // sections
    outs = []
    for i, piece in enumerate(pieces):
        lo = i * width

        def backward(g, lo=lo):
            full = np.zeros_like(a.data)
            idx = [slice(None)] * full.ndim
            idx[axis] = slice(lo, lo + width)
            full[tuple(idx)] = g
            a._accum(full)

        outs.append(_node(piece.copy(), "split", (a,), backward))
    return outs


# -- elementwise / reductions -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _node(out, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")

    def backward(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), "log", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def backward(g):
        a._accum(g * (0.5 / out))

    return _node(out, "sqrt", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return _node(a.data * mask, "relu", (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _node(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather. Backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range [0, {table.data.shape[0]})")

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        table._accum(acc)

    return _node(table.data[ids], "embedding", (table,), backward)


def dropout(a: Tensor, p: float, rng: RngState, train: bool) -> Tensor:
    """Inverted dropout: surviving values scaled by 1/(1-p) at train time."""
    if not train or p == 0.0:
        return a
    draw_dtype = np.float32 if a.data.dtype == np.float32 else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= p).astype(a.data.dtype)
    factor = a.data.dtype.type(1.0 / (1.0 - p))
    m = keep
    m *= factor

    def backward(g):
        a._accum(g * m)

    return _node(a.data * m, "dropout", (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set positions where mask is True to `value`; their gradient is zero."""
    out = np.where(mask, a.data.dtype.type(value), a.data)

    def backward(g):
        a._accum(np.where(mask, 0, g) if mask.shape == g.shape else _unbroadcast(np.where(mask, 0, g), a.shape))

    return _node(out, "masked_fill", (a,), backward)


# -- composite ops ------------------------------------------------------------


def softmax_parts(x: Tensor, axis: int = -1):
    """Stable softmax split into (numerator, denominator).

    Numerator is exp(x - max), in (0, 1]; denominator the sum along `axis`.
    Exposed separately so callers can transform each part before dividing.
    The max is treated as constant, which leaves softmax gradients exact.
    """
    m = np.max(x.data, axis=axis, keepdims=True)
    num = exp(sub(x, Tensor(m)))
    den = reduce_sum(num, axis=axis, keepdims=True)
    return num, den


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    num, den = softmax_parts(x, axis)
    return div(num, den)


def layer_stats(x: Tensor, axis: int = -1):
    """Per-slice mean and population variance (divide by n), differentiable."""
    mu = reduce_mean(x, axis=axis, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=axis, keepdims=True)
    return mu, var


def cross_entropy(logits: Tensor, targets: np.ndarray, keep_mask=None, smoothing: float = 0.0):
    """Label-smoothed cross entropy averaged over kept positions.

    Smoothing spreads `smoothing` mass uniformly over the whole vocabulary.
    Returns (loss, stats) where stats carries token count, summed nll of the
    smoothed objective, and argmax-accuracy numerator for logging.
    """
    targets = np.asarray(targets)
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if keep_mask is None:
        kflat = np.ones(tflat.shape[0], dtype=bool)
    else:
        kflat = np.asarray(keep_mask).reshape(-1)
    n_tok = int(kflat.sum())
    if n_tok == 0:
        raise ValueError("cross_entropy: no unmasked target positions")

    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)

    rows = np.arange(tflat.shape[0])
    nll_t = -logp[rows, tflat]
    nll_u = -logp.mean(axis=-1)
    per_tok = (1.0 - smoothing) * nll_t + smoothing * nll_u
    loss_val = np.asarray((per_tok * kflat).sum() / n_tok, dtype=logits.data.dtype)

    correct = int(((flat.argmax(axis=-1) == tflat) & kflat).sum())
    # nll of the hard targets (for perplexity), independent of smoothing
    nll_sum = float((nll_t * kflat).sum())

    def backward(g):
        p = ez / denom
        q = np.full_like(p, smoothing / v)
        q[rows, tflat] += 1.0 - smoothing
        d = (p - q) * (kflat / n_tok)[:, None] * g
        logits._accum(d.reshape(logits.data.shape).astype(logits.data.dtype))

    loss = _node(loss_val, "cross_entropy", (logits,), backward)
    stats = {"tokens": n_tok, "nll_sum": nll_sum, "correct": correct}
    return loss, stats
