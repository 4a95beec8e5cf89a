"""Adaptive node pruning for the position-wise feed-forward layers.

Per-node ceilings of the raw ReLU output are tracked with the same
EMA rule the quantizer uses (momentum 0.9) over a few hundred forward
passes on training data, with all weights frozen.  A node is pruned when
its ceiling falls below z * sigma, sigma being the population standard
deviation of the layer's ceiling vector; pruning physically shrinks both
feed-forward matrices and performs no retraining.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import QuantTransformer
from .quant import StateError

DEFAULT_Z = 0.025
EMA_MOMENTUM = 0.9


@dataclass
class NodeStats:
    """Per-node running x_max of one feed-forward layer's ReLU output."""

    layer: str
    x_max: np.ndarray
    steps: int = 0

    @property
    def sigma(self) -> float:
        return float(np.std(self.x_max))


def _ff_layers(model: QuantTransformer) -> list[str]:
    names = [f"encoder.{i}.ffn" for i in range(model.cfg.num_encoder_layers)]
    names += [f"decoder.{i}.ffn" for i in range(model.cfg.num_decoder_layers)]
    return names


def estimate_node_xmax(model: QuantTransformer, batches, n_steps: int,
                       lm: bool = False) -> dict[str, NodeStats]:
    """Track per-node ReLU ceilings over forward passes, weights untouched.

    Values are captured before the ReLU-output quantizer and padding
    positions are ignored; the estimates are independent of the
    quantization trackers.
    """
    if n_steps < 100:
        warnings.warn(f"x_max estimated over only {n_steps} steps; "
                      "running estimates may be unstable", RuntimeWarning)
    stats = {name: NodeStats(name, np.zeros(0)) for name in _ff_layers(model)}
    model.capture_relu = True
    done = 0
    m = np.float32(EMA_MOMENTUM)
    with T.no_grad():
        while done < n_steps:
            progressed = False
            for b in batches:
                if lm:
                    inp, tgt, keep = b
                    model.loss_lm(inp, tgt, keep, train=False)
                    keeps = {"encoder": None}
                else:
                    model.loss_seq2seq(b, train=False)
                    keeps = {"encoder": ~b.src_pad, "decoder": ~b.tgt_pad}
                for name, st in stats.items():
                    act = model.relu_capture[name]  # (B, S, d_ff), pre-quantization
                    keep = keeps[name.split(".")[0]]
                    sel = act if keep is None else act[keep]
                    node_max = sel.reshape(-1, act.shape[-1]).max(axis=0)
                    if st.steps == 0:
                        st.x_max = node_max.astype(np.float32)
                    else:
                        st.x_max = m * st.x_max + (1 - m) * node_max.astype(np.float32)
                    st.steps += 1
                done += 1
                progressed = True
                if done >= n_steps:
                    break
            if not progressed:
                raise ValueError("empty estimation stream")
    model.capture_relu = False
    model.relu_capture.clear()
    return stats


def adaptive_prune_mask(stats: NodeStats, z: float = DEFAULT_Z) -> np.ndarray:
    """Indices with x_max < z * sigma.  Strict inequality: a zero-sigma layer
    prunes nothing."""
    if z <= 0:
        raise ValueError("z must be positive")
    return np.flatnonzero(stats.x_max < z * stats.sigma)


def fixed_prune_mask(model: QuantTransformer, layer: str, ratio: float,
                     criterion: str, stats: NodeStats | None = None,
                     incoming_only: bool = False) -> np.ndarray:
    """Lowest floor(ratio * d_ff) nodes by the given criterion.

    `l1` sorts by the L1 norm of a node's incoming weight column plus (unless
    incoming_only) its outgoing row; `xmax` sorts by the estimated ceilings.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must be in [0, 1]")
    w1 = model.params[f"{layer}.w1.w"].data  # (d_model, d_ff)
    n = w1.shape[1]
    count = int(ratio * n)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if criterion == "l1":
        key = np.abs(w1).sum(axis=0)
        if not incoming_only:
            key = key + np.abs(model.params[f"{layer}.w2.w"].data).sum(axis=1)
    elif criterion == "xmax":
        if stats is None:
            raise ValueError("xmax criterion needs NodeStats")
        key = stats.x_max
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return np.sort(np.argsort(key, kind="stable")[:count])


def apply_prune(model: QuantTransformer, masks: dict[str, np.ndarray]) -> QuantTransformer:
    """Physically remove the masked nodes and return the shrunken model.

    Requires a frozen model: stored weight ranges are sliced, not recomputed,
    so pruning dead nodes leaves every output bit-identical.
    """
    for layer in masks:
        if model.points[f"{layer}.w1.w"].weight_params is None:
            raise StateError("apply_prune needs a frozen model (call freeze_quantization)")
    ff_dims = {side: list(dims) for side, dims in model.ff_dims.items()}
    for layer, idx in masks.items():
        side, num, _ = layer.split(".")
        d_ff = ff_dims[side][int(num)]
        if len(idx) >= d_ff:
            raise ValueError(f"refusing to prune every node of {layer}")
        ff_dims[side][int(num)] = d_ff - len(idx)

    pruned = QuantTransformer(model.cfg, seed=0, bucketing=model.bucketing,
                              naive=model.naive, dtype=model.dtype, ff_dims=ff_dims)
    st = model.state()
    for layer, idx in masks.items():
        st["weights"][f"{layer}.w1.w"] = np.delete(st["weights"][f"{layer}.w1.w"], idx, axis=1)
        st["weights"][f"{layer}.w1.b"] = np.delete(st["weights"][f"{layer}.w1.b"], idx, axis=0)
        st["weights"][f"{layer}.w2.w"] = np.delete(st["weights"][f"{layer}.w2.w"], idx, axis=0)
        p1 = st["points"][f"{layer}.w1.w"]
        if "w_min" in p1 and p1["w_min"].shape[0] > 1:  # bucketed per output dim
            p1["w_min"] = np.delete(p1["w_min"], idx)
            p1["w_max"] = np.delete(p1["w_max"], idx)
    pruned.load_state(st)
    pruned.quant_active = model.quant_active
    return pruned


@dataclass
class PruneReport:
    method: str
    parameter: float  # z or ratio
    layers: list = field(default_factory=list)  # (name, d_ff, pruned count, threshold)
    pruned_fraction: float = 0.0
    size_before_bits: int = 0
    size_after_bits: int = 0
    metric_before: dict = field(default_factory=dict)
    metric_after: dict = field(default_factory=dict)

    @property
    def compression_gain(self) -> float:
        return self.size_before_bits / self.size_after_bits

    def text(self) -> str:
        lines = [f"pruning method: {self.method} (parameter {self.parameter})"]
        for name, d_ff, count, thr in self.layers:
            lines.append(f"  {name}: pruned {count}/{d_ff} nodes (threshold {thr:.6g})")
        lines.append(f"pruned fraction: {100 * self.pruned_fraction:.2f}%")
        lines.append(f"size: {self.size_before_bits} -> {self.size_after_bits} bits "
                     f"({self.compression_gain:.4f}x)")
        if self.metric_before:
            lines.append(f"metric before: {self.metric_before}")
            lines.append(f"metric after:  {self.metric_after}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["layer,d_ff,pruned,threshold"]
        rows += [f"{n},{d},{c},{t:.8g}" for n, d, c, t in self.layers]
        return "\n".join(rows)


def export_xmax_histogram(stats: NodeStats, bins: int):
    """(bin lower edge, count) rows over the layer's x_max vector."""
    hi = float(stats.x_max.max())
    if hi <= 0:
        hi = 1.0
    counts, edges = np.histogram(stats.x_max, bins=bins, range=(0.0, hi))
    return [(float(edges[i]), int(counts[i])) for i in range(bins)]


def histogram_csv(stats_by_layer: dict[str, NodeStats], bins: int) -> str:
    rows = ["layer,bin_lower_edge,count"]
    for name, st in stats_by_layer.items():
        for edge, count in export_xmax_histogram(st, bins):
            rows.append(f"{name},{edge:.8g},{count}")
    return "\n".join(rows)
