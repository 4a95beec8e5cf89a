"""Uniform fake quantization with bucketed ranges and straight-through gradients.

A value x is mapped to  x_min + round((clamp(x) - x_min) / s) * s  with
s = (x_max - x_min) / (2^k - 1).  Weights use exact per-bucket min/max,
recomputed every forward until frozen; activations use running estimates
updated by an exponential moving average (momentum 0.9).

Arithmetic conventions (shared by any reference implementation):
  * everything is computed elementwise in the input dtype (float32 in
    production);
  * rounding is floor(v + 0.5); operands are nonnegative there, so ties
    round half away from zero;
  * the rounded index is clipped to [0, 2^k - 1] and the top index maps
    to exactly x_max, so both interval endpoints are representable;
  * a degenerate range (x_max == x_min) has s = 0 and maps everything to
    x_min.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _node


class ConfigError(ValueError):
    """Invalid quantization configuration."""


class StateError(RuntimeError):
    """Operation not valid in the tracker's current state."""


def step_size(x_min, x_max, k: int):
    """Step between adjacent representable values; 0 for a degenerate range."""
    if k < 1:
        raise ConfigError(f"bit width must be >= 1, got {k}")
    x_min = np.asarray(x_min)
    x_max = np.asarray(x_max)
    if np.any(x_max < x_min):
        raise ConfigError("x_max < x_min")
    return (x_max - x_min) / ((1 << k) - 1)


@dataclass
class QuantParams:
    """Endpoints and derived step size for one quantization domain.

    Fields may be scalars or per-bucket arrays of equal shape.
    """

    k: int
    x_min: np.ndarray
    x_max: np.ndarray
    s: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x_min = np.asarray(self.x_min)
        self.x_max = np.asarray(self.x_max)
        self.s = step_size(self.x_min, self.x_max, self.k)


def quantize_array(x: np.ndarray, x_min, x_max, s, k: int) -> np.ndarray:
    """Vectorized quantize-dequantize; params broadcast against x."""
    dt = x.dtype
    lo = np.asarray(x_min, dtype=dt)
    hi = np.asarray(x_max, dtype=dt)
    st = np.asarray(s, dtype=dt)
    levels = (1 << k) - 1
    clamped = np.clip(x, lo, hi)
    degenerate = not np.all(st > 0)
    safe_s = np.where(st > 0, st, 1) if degenerate else st
    idx = clamped - lo
    idx /= safe_s
    idx += dt.type(0.5)
    np.floor(idx, out=idx)
    np.clip(idx, 0, levels, out=idx)
    top = idx == levels
    idx *= st
    idx += lo
    q = np.where(top, np.broadcast_to(hi, idx.shape), idx)
    if degenerate:
        q = np.where(st > 0, q, np.broadcast_to(lo, q.shape))
    return q.astype(dt, copy=False)


def quantize(x: Tensor, params: QuantParams, axis: int | None = None) -> Tensor:
    """Quantize a tensor (no gradient tracking), bucketed along `axis` if given."""
    lo = _bucket_view(params.x_min, x.ndim, axis)
    hi = _bucket_view(params.x_max, x.ndim, axis)
    s = _bucket_view(params.s, x.ndim, axis)
    return Tensor(quantize_array(x.data, lo, hi, s, params.k))


def ste_backward(upstream: np.ndarray, x: np.ndarray, x_min, x_max) -> np.ndarray:
    """Straight-through gradient: pass inside [x_min, x_max], zero outside."""
    mask = (x >= x_min) & (x <= x_max)
    return upstream * mask


def fake_quant(x: Tensor, x_min, x_max, s, k: int, label=None) -> Tensor:
    """Quantize-dequantize with a straight-through backward rule.

    Params must already be broadcastable against x (see _bucket_view).
    """
    q = quantize_array(x.data, x_min, x_max, s, k)

    def backward(g):
        # x is in range exactly where the clamp was a no-op
        in_range = (x.data >= x_min) & (x.data <= x_max)
        x._accum(g * in_range)

    return _node(q, "fake_quant", (x,), backward, label=label)


def _bucket_view(params, ndim: int, axis: int | None):
    """Reshape per-bucket params so they broadcast along `axis` of an
    ndim-dimensional tensor."""
    arr = np.asarray(params)
    if axis is None or arr.ndim == 0:
        return arr
    shape = [1] * ndim
    shape[axis % ndim] = arr.shape[0]
    return arr.reshape(shape)


def observed_range(data: np.ndarray, axis: int | None, keep: np.ndarray | None = None,
                   symmetric: bool = False):
    """Per-bucket (min, max) of `data`, ignoring positions where keep is False.

    axis=None pools everything into a single bucket.  symmetric=True returns
    (-absmax, absmax) instead, the classic naive activation range.
    """
    if keep is not None:
        keep_b = np.broadcast_to(keep, data.shape)
        if not keep_b.any():
            raise ValueError("observed_range: every position masked out")
        lo_fill = np.array(np.inf, dtype=data.dtype)
        hi_fill = np.array(-np.inf, dtype=data.dtype)
        data_min = np.where(keep_b, data, lo_fill)
        data_max = np.where(keep_b, data, hi_fill)
    else:
        data_min = data_max = data
    if axis is None:
        mn, mx = data_min.min(), data_max.max()
        mn = np.asarray(mn).reshape(1)
        mx = np.asarray(mx).reshape(1)
    else:
        ax = axis % data.ndim
        reduce_axes = tuple(i for i in range(data.ndim) if i != ax)
        mn = data_min.min(axis=reduce_axes)
        mx = data_max.max(axis=reduce_axes)
    if symmetric:
        amax = np.maximum(np.abs(mn), np.abs(mx))
        return -amax, amax
    return mn, mx


def weight_ranges(w: np.ndarray, axis: int | None, k: int) -> QuantParams:
    """Exact per-bucket min/max of a weight tensor."""
    mn, mx = observed_range(w, axis)
    return QuantParams(k, mn, mx)


class RangeTracker:
    """Running per-bucket (x_min, x_max) estimates for an activation site.

    The first observation initializes the estimates directly; afterwards
    new = momentum * old + (1 - momentum) * observed.  Once frozen the
    estimates never change.
    """

    def __init__(self, buckets: int = 1, momentum: float = 0.9, zero_pin: bool = False):
        self.buckets = buckets
        self.momentum = momentum
        self.zero_pin = zero_pin
        self.x_min = np.zeros(buckets, dtype=np.float32)
        self.x_max = np.zeros(buckets, dtype=np.float32)
        self.initialized = False
        self.frozen = False
        self.update_count = 0

    def update(self, observed_min, observed_max) -> None:
        if self.frozen:
            raise StateError("update on a frozen range tracker")
        omin = np.broadcast_to(np.asarray(observed_min, dtype=np.float32), (self.buckets,))
        omax = np.broadcast_to(np.asarray(observed_max, dtype=np.float32), (self.buckets,))
        if not self.initialized:
            self.x_min = omin.copy()
            self.x_max = omax.copy()
            self.initialized = True
        else:
            m = np.float32(self.momentum)
            self.x_min = m * self.x_min + (1 - m) * omin
            self.x_max = m * self.x_max + (1 - m) * omax
        if self.zero_pin:
            self.x_min = np.zeros_like(self.x_min)
            self.x_max = np.maximum(self.x_max, 0)
        self.update_count += 1

    def freeze(self) -> None:
        if not self.initialized:
            raise StateError("freeze on an uninitialized range tracker")
        self.frozen = True

    def params(self, k: int) -> QuantParams:
        if not self.initialized:
            raise StateError("quantization requested before any range estimate")
        return QuantParams(k, self.x_min, self.x_max)

    def state(self) -> dict:
        return {
            "x_min": self.x_min.copy(),
            "x_max": self.x_max.copy(),
            "initialized": self.initialized,
            "frozen": self.frozen,
            "update_count": self.update_count,
        }

    def load_state(self, state: dict) -> None:
        self.x_min = np.asarray(state["x_min"], dtype=np.float32).copy()
        self.x_max = np.asarray(state["x_max"], dtype=np.float32).copy()
        self.initialized = bool(state["initialized"])
        self.frozen = bool(state["frozen"])
        self.update_count = int(state["update_count"])


@dataclass
class QuantPointConfig:
    """Static description of one quantization site."""

    name: str
    tag: str
    kind: str  # "weight" | "activation"
    k: int = 8
    bucket_axis: int | None = None  # tensor axis owning per-bucket params
    buckets: int = 1
    zero_pin: bool = False
    pad_exclude: bool = True
    enabled: bool = True
    momentum: float = 0.9
    symmetric: bool = False  # naive absmax ranges instead of min/max
    quantize_once: bool = False  # fixed tensors (positional encodings)


class QuantPoint:
    """A live quantization site: config plus mutable range state."""

    def __init__(self, cfg: QuantPointConfig):
        self.cfg = cfg
        self.tracker = None
        if cfg.kind == "activation":
            self.tracker = RangeTracker(cfg.buckets, cfg.momentum, cfg.zero_pin)
        self.weight_params: QuantParams | None = None  # set when frozen
        self.last_value: np.ndarray | None = None  # debug capture
        self.capture = False

    @property
    def name(self):
        return self.cfg.name

    @property
    def tag(self):
        return self.cfg.tag

    @property
    def enabled(self):
        return self.cfg.enabled

    def __call__(self, x: Tensor, *, train: bool, active: bool = True,
                 stats_mask: np.ndarray | None = None) -> Tensor:
        """Fake-quantize `x`; identity when the point is disabled or inactive."""
        cfg = self.cfg
        if not cfg.enabled or cfg.k >= 32 or not active:
            return x
        axis = cfg.bucket_axis
        if cfg.kind == "weight":
            if self.weight_params is not None:
                p = self.weight_params
            else:
                p = weight_ranges(x.data, axis, cfg.k)
        else:
            keep = stats_mask if cfg.pad_exclude else None
            if train and not self.tracker.frozen:
                mn, mx = observed_range(x.data, axis, keep, symmetric=cfg.symmetric)
                self.tracker.update(mn, mx)
            p = self.tracker.params(cfg.k)
        lo = _bucket_view(p.x_min, x.ndim, axis)
        hi = _bucket_view(p.x_max, x.ndim, axis)
        s = _bucket_view(p.s, x.ndim, axis)
        out = fake_quant(x, lo, hi, s, cfg.k, label=cfg.name)
        if self.capture:
            self.last_value = out.data
        return out

    def freeze(self, weight: np.ndarray | None = None) -> None:
        """Pin ranges: trackers stop updating, weight ranges are stored."""
        if self.cfg.kind == "weight":
            if weight is None:
                raise StateError(f"freezing weight point {self.name} needs the weight tensor")
            self.weight_params = weight_ranges(weight, self.cfg.bucket_axis, self.cfg.k)
        elif self.tracker.initialized:
            self.tracker.freeze()

    def state(self) -> dict:
        st = {"enabled": self.cfg.enabled}
        if self.tracker is not None:
            st["tracker"] = self.tracker.state()
        if self.weight_params is not None:
            st["w_min"] = self.weight_params.x_min.copy()
            st["w_max"] = self.weight_params.x_max.copy()
        return st

    def load_state(self, st: dict) -> None:
        self.cfg.enabled = bool(st["enabled"])
        if self.tracker is not None and "tracker" in st:
            self.tracker.load_state(st["tracker"])
        if "w_min" in st:
            self.weight_params = QuantParams(self.cfg.k, st["w_min"], st["w_max"])
