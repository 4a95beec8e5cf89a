"""Encoder-decoder Transformer (post-LN) with named quantization points.

Every site that gets quantized is declared once in `build_layout`, which
both the live model and the analytic size accounting consume.  Activation
sites and what they cover:

  encoder.embed_sum / decoder.embed_sum   input embedding + positional sum
  *.self_attn.input, *.cross_attn.input   shared (Q,K,V) input before the
  *.cross_attn.memory                     projections (cross attention
                                          tracks query and memory inputs
                                          separately)
  *.softmax_numerator                     exp(scores - max), pinned at 0
  *.softmax_denominator                   its sum over keys
  *.softmax_output                        the quotient, pinned at 0
  *.output                                attention heads, concatenated
  *.ffn.relu                              ReLU output, pinned at 0
  *.ffn.output                            second feed-forward linear
  *.ln*.numerator/denominator/quotient/output   LayerNorm internals

Bucketed sites (one (s, x_min) pair per feature): the embed sums, the
attention inputs, the attention output, the feed-forward output, and the
LayerNorm numerator/quotient/output.  All weight tensors are bucketed per
output dimension.  Softmax numerator/output and ReLU output pin x_min = 0
so the exact zeros created by masking and ReLU stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .quant import QuantPoint, QuantPointConfig, quantize_array, weight_ranges
from .tensor import RngState, Tensor

WEIGHT_TAGS = (
    "embedding",
    "positional_encoding",
    "attention_weights",
    "ffn_weights",
    "layernorm_gamma",
    "output_projection",
)

ACTIVATION_TAGS = (
    "encoder_embed_sum",
    "decoder_embed_sum",
    "attention_input",
    "softmax_numerator",
    "softmax_denominator",
    "softmax_output",
    "attention_output",
    "relu_output",
    "ffn_output",
    "layernorm_numerator",
    "layernorm_denominator",
    "layernorm_quotient",
    "attention_layernorm_output",
    "ffn_layernorm_output",
)

# feature-bucketed activation sites; everything else gets a single range pair
BUCKETED_ACT_TAGS = frozenset({
    "encoder_embed_sum",
    "decoder_embed_sum",
    "attention_input",
    "attention_output",
    "ffn_output",
    "layernorm_numerator",
    "layernorm_quotient",
    "attention_layernorm_output",
    "ffn_layernorm_output",
})

ZERO_PINNED_TAGS = frozenset({"softmax_numerator", "softmax_output", "relu_output"})

NEG_INF = -1e9


@dataclass
class ModelConfig:
    """Transformer hyperparameters.

    Weight init follows the reference setup: Xavier-uniform projection
    matrices, N(0, d_model^-0.5) embeddings, unit gamma / zero beta, zero
    biases.  precision=32 disables every quantization point.
    """

    vocab_size: int
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    d_model: int = 512
    d_ff: int = 2048
    num_heads: int = 8
    d_k: int | None = None
    d_v: int | None = None
    max_len: int = 256
    dropout: float = 0.1
    label_smoothing: float = 0.1
    layernorm_eps: float = 1e-5
    share_embedding: bool = True
    output_bias: bool = False
    precision: int = 32

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = self.d_model // self.num_heads
        if self.d_v is None:
            self.d_v = self.d_k
        if self.precision not in (4, 6, 8, 32):
            raise ValueError(f"precision must be one of 4, 6, 8, 32; got {self.precision}")
        if self.vocab_size < 5:
            raise ValueError("vocab_size too small for reserved tokens")


def base_config(vocab_size: int, **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **kw)


def big_config(vocab_size: int, **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=1024, d_ff=4096, num_heads=16, **kw)


def lm_config(vocab_size: int, **kw) -> ModelConfig:
    """Word-level LM variant: two encoder layers, width 200, two heads with
    key/value size 64, tied input/output embeddings."""
    kw.setdefault("dropout", 0.2)
    kw.setdefault("max_len", 64)
    return ModelConfig(
        vocab_size=vocab_size,
        num_encoder_layers=2,
        num_decoder_layers=0,
        d_model=200,
        d_ff=200,
        num_heads=2,
        d_k=64,
        d_v=64,
        label_smoothing=0.0,
        share_embedding=True,
        output_bias=True,
        **kw,
    )


@dataclass
class WeightSpec:
    name: str
    tag: str
    shape: tuple
    init: str  # xavier | embed | ones | zeros | pe
    quantized: bool
    bucket_axis: int | None
    buckets: int
    trainable: bool = True


@dataclass
class ActSpec:
    name: str
    tag: str
    buckets: int
    bucket_axis: int | None
    zero_pin: bool


@dataclass
class Layout:
    weights: list
    acts: list

    def weight(self, name):
        return next(w for w in self.weights if w.name == name)


def _ff_dim(cfg, ff_dims, side, i):
    if ff_dims and side in ff_dims:
        return ff_dims[side][i]
    return cfg.d_ff


def build_layout(cfg: ModelConfig, bucketing: bool = True, ff_dims: dict | None = None) -> Layout:
    """Enumerate every parameter and quantization site of the architecture."""
    weights: list[WeightSpec] = []
    acts: list[ActSpec] = []

    def w(name, tag, shape, init, axis, quantized=True, trainable=True):
        if not bucketing:
            axis = None
        buckets = 1 if axis is None else shape[axis]
        weights.append(WeightSpec(name, tag, tuple(shape), init, quantized, axis, buckets, trainable))

    def a(name, tag, width):
        bucketed = bucketing and tag in BUCKETED_ACT_TAGS
        acts.append(ActSpec(
            name, tag,
            buckets=width if bucketed else 1,
            bucket_axis=-1 if bucketed else None,
            zero_pin=tag in ZERO_PINNED_TAGS,
        ))

    d, h = cfg.d_model, cfg.num_heads
    w("embedding", "embedding", (cfg.vocab_size, d), "embed", 1)
    w("positional_encoding", "positional_encoding", (cfg.max_len, d), "pe", 1, trainable=False)
    if not cfg.share_embedding:
        w("output_projection.w", "output_projection", (d, cfg.vocab_size), "xavier", 1)
    if cfg.output_bias:
        w("output_projection.b", "output_projection", (cfg.vocab_size,), "zeros", None, quantized=False)

    def attention(base, cross):
        a(f"{base}.input", "attention_input", d)
        if cross:
            a(f"{base}.memory", "attention_input", d)
        w(f"{base}.wq.w", "attention_weights", (d, h * cfg.d_k), "xavier", 1)
        w(f"{base}.wk.w", "attention_weights", (d, h * cfg.d_k), "xavier", 1)
        w(f"{base}.wv.w", "attention_weights", (d, h * cfg.d_v), "xavier", 1)
        a(f"{base}.softmax_numerator", "softmax_numerator", 0)
        a(f"{base}.softmax_denominator", "softmax_denominator", 0)
        a(f"{base}.softmax_output", "softmax_output", 0)
        a(f"{base}.output", "attention_output", h * cfg.d_v)
        w(f"{base}.wo.w", "attention_weights", (h * cfg.d_v, d), "xavier", 1)

    def layer_norm(base, out_tag):
        w(f"{base}.gamma", "layernorm_gamma", (d,), "ones", 0)
        w(f"{base}.beta", "layernorm_gamma", (d,), "zeros", None, quantized=False)
        a(f"{base}.numerator", "layernorm_numerator", d)
        a(f"{base}.denominator", "layernorm_denominator", 0)
        a(f"{base}.quotient", "layernorm_quotient", d)
        a(f"{base}.output", out_tag, d)

    def feed_forward(base, dff):
        w(f"{base}.w1.w", "ffn_weights", (d, dff), "xavier", 1)
        w(f"{base}.w1.b", "ffn_weights", (dff,), "zeros", None, quantized=False)
        a(f"{base}.relu", "relu_output", 0)
        w(f"{base}.w2.w", "ffn_weights", (dff, d), "xavier", 1)
        w(f"{base}.w2.b", "ffn_weights", (d,), "zeros", None, quantized=False)
        a(f"{base}.output", "ffn_output", d)

    a("encoder.embed_sum", "encoder_embed_sum", d)
    for i in range(cfg.num_encoder_layers):
        base = f"encoder.{i}"
        attention(f"{base}.self_attn", cross=False)
        layer_norm(f"{base}.ln1", "attention_layernorm_output")
        feed_forward(f"{base}.ffn", _ff_dim(cfg, ff_dims, "encoder", i))
        layer_norm(f"{base}.ln2", "ffn_layernorm_output")

    if cfg.num_decoder_layers:
        a("decoder.embed_sum", "decoder_embed_sum", d)
    for i in range(cfg.num_decoder_layers):
        base = f"decoder.{i}"
        attention(f"{base}.self_attn", cross=False)
        layer_norm(f"{base}.ln1", "attention_layernorm_output")
        attention(f"{base}.cross_attn", cross=True)
        layer_norm(f"{base}.ln2", "attention_layernorm_output")
        feed_forward(f"{base}.ffn", _ff_dim(cfg, ff_dims, "decoder", i))
        layer_norm(f"{base}.ln3", "ffn_layernorm_output")

    return Layout(weights, acts)


def sinusoidal_encodings(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((max_len, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2 + d_model % 2])[:, : pe[:, 1::2].shape[1]]
    return pe


class QuantTransformer:
    """The quantizable model: parameters, quant points, and forward paths.

    `quant_active` gates every point at once (training regimes flip it);
    individual points can be disabled for ablations via their tag or name.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, bucketing: bool = True,
                 naive: bool = False, dtype=np.float32, ff_dims: dict | None = None):
        self.cfg = cfg
        self.bucketing = bucketing
        self.naive = naive
        self.dtype = dtype
        self.ff_dims = ff_dims or {
            "encoder": [cfg.d_ff] * cfg.num_encoder_layers,
            "decoder": [cfg.d_ff] * cfg.num_decoder_layers,
        }
        self.layout = build_layout(cfg, bucketing, self.ff_dims)
        self.quant_active = cfg.precision < 32
        self.rng = RngState(seed)
        self._init_rng = self.rng.child("init")
        self.dropout_rng = self.rng.child("dropout")

        self.params: dict[str, Tensor] = {}
        self.points: dict[str, QuantPoint] = {}
        for spec in self.layout.weights:
            arr = self._init_weight(spec)
            self.params[spec.name] = Tensor(arr, requires_grad=spec.trainable)
            self.params[spec.name].label = spec.name
            if spec.quantized:
                self.points[spec.name] = QuantPoint(QuantPointConfig(
                    name=spec.name, tag=spec.tag, kind="weight", k=cfg.precision,
                    bucket_axis=spec.bucket_axis, buckets=spec.buckets,
                    quantize_once=(spec.init == "pe"),
                ))
        for spec in self.layout.acts:
            self.points[spec.name] = QuantPoint(QuantPointConfig(
                name=spec.name, tag=spec.tag, kind="activation", k=cfg.precision,
                bucket_axis=spec.bucket_axis, buckets=spec.buckets,
                zero_pin=spec.zero_pin and not naive,
                pad_exclude=not naive,
                momentum=0.0 if naive else 0.9,
                symmetric=naive,
            ))

        # positional encodings are fixed, so quantize them once up front
        pe_spec = self.layout.weight("positional_encoding")
        pe_raw = self.params["positional_encoding"].data
        pe_point = self.points["positional_encoding"]
        if cfg.precision < 32 and pe_point.enabled:
            p = weight_ranges(pe_raw, pe_spec.bucket_axis, cfg.precision)
            pe_point.weight_params = p
            self._pe_quant = quantize_array(
                pe_raw,
                _bview(p.x_min, 2, pe_spec.bucket_axis),
                _bview(p.x_max, 2, pe_spec.bucket_axis),
                _bview(p.s, 2, pe_spec.bucket_axis),
                cfg.precision,
            )
        else:
            self._pe_quant = pe_raw

        self.relu_capture: dict[str, np.ndarray] = {}
        self.capture_relu = False

    # -- construction helpers -------------------------------------------------

    def _init_weight(self, spec: WeightSpec) -> np.ndarray:
        if spec.init == "xavier":
            fan_in, fan_out = spec.shape[0], spec.shape[1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arr = self._init_rng.uniform(-limit, limit, spec.shape)
        elif spec.init == "embed":
            arr = self._init_rng.normal(spec.shape, scale=self.cfg.d_model ** -0.5)
        elif spec.init == "ones":
            arr = np.ones(spec.shape)
        elif spec.init == "zeros":
            arr = np.zeros(spec.shape)
        elif spec.init == "pe":
            arr = sinusoidal_encodings(self.cfg.max_len, self.cfg.d_model)
        else:
            raise ValueError(spec.init)
        return arr.astype(self.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- quant point management ------------------------------------------------

    def set_quant_active(self, active: bool) -> None:
        self.quant_active = bool(active) and self.cfg.precision < 32

    def set_points_enabled(self, tags_or_names, enabled: bool) -> None:
        wanted = set(tags_or_names)
        valid = set(WEIGHT_TAGS) | set(ACTIVATION_TAGS) | set(self.points)
        unknown = wanted - valid
        if unknown:
            raise KeyError(
                f"unknown quant point(s) {sorted(unknown)}; valid tags: "
                f"{sorted(set(WEIGHT_TAGS) | set(ACTIVATION_TAGS))}")
        for p in self.points.values():
            if p.tag in wanted or p.name in wanted:
                p.cfg.enabled = enabled

    def enable_only(self, tags_or_names) -> None:
        self.set_points_enabled(set(WEIGHT_TAGS) | set(ACTIVATION_TAGS), False)
        self.set_points_enabled(tags_or_names, True)

    def freeze_quantization(self) -> None:
        """Pin every range: weight min/max stored, trackers frozen."""
        for name, point in self.points.items():
            if point.cfg.kind == "weight":
                if not point.cfg.quantize_once:
                    point.freeze(self.params[name].data)
            elif point.tracker.initialized:
                point.tracker.freeze()

    def tracker_update_counts(self) -> dict[str, int]:
        return {n: p.tracker.update_count for n, p in self.points.items()
                if p.tracker is not None}

    # -- forward paths -----------------------------------------------------------

    def _q(self, name: str, x: Tensor, train: bool, stats_mask=None) -> Tensor:
        return self.points[name](x, train=train, active=self.quant_active,
                                 stats_mask=stats_mask)

    def _qw(self, name: str, train: bool) -> Tensor:
        return self._q(name, self.params[name], train)

    def _pe(self, length: int) -> Tensor:
        if self.quant_active and self.points["positional_encoding"].enabled:
            return Tensor(self._pe_quant[:length])
        return Tensor(self.params["positional_encoding"].data[:length])

    def _embed(self, ids: np.ndarray, emb_q: Tensor, point_name: str, train: bool,
               keep=None) -> Tensor:
        x = T.embedding(emb_q, ids)
        x = T.scale(x, math.sqrt(self.cfg.d_model))
        x = T.add(x, self._pe(ids.shape[1]))
        x = self._q(point_name, x, train, keep)
        return T.dropout(x, self.cfg.dropout, self.dropout_rng, train)

    def quantized_embedding(self, train: bool) -> Tensor:
        return self._q("embedding", self.params["embedding"], train)

    def _attention(self, base: str, xq: Tensor, xkv: Tensor | None, attn_mask,
                   train: bool, q_keep, kv_keep) -> Tensor:
        """Multi-head attention; xkv=None means self-attention."""
        cfg = self.cfg
        xq = self._q(f"{base}.input", xq, train, q_keep)
        if xkv is None:
            xkv = xq
        else:
            xkv = self._q(f"{base}.memory", xkv, train, kv_keep)

        def heads(lin_name, x, width):
            h = T.matmul(x, self._qw(f"{base}.{lin_name}.w", train))
            b, s = h.shape[0], h.shape[1]
            h = T.reshape(h, (b, s, cfg.num_heads, width))
            return T.transpose(h, (0, 2, 1, 3))

        q = heads("wq", xq, cfg.d_k)
        k = heads("wk", xkv, cfg.d_k)
        v = heads("wv", xkv, cfg.d_v)

        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        scores = T.scale(scores, 1.0 / math.sqrt(cfg.d_k))
        if attn_mask is not None:
            scores = T.masked_fill(scores, attn_mask, NEG_INF)

        head_keep = None if q_keep is None else q_keep.reshape(q_keep.shape[0], 1, -1, 1)
        num, den = T.softmax_parts(scores, axis=-1)
        num = self._q(f"{base}.softmax_numerator", num, train, head_keep)
        den = T.reduce_sum(num, axis=-1, keepdims=True)
        den = self._q(f"{base}.softmax_denominator", den, train, head_keep)
        probs = T.div(num, den)
        probs = self._q(f"{base}.softmax_output", probs, train, head_keep)
        probs = T.dropout(probs, cfg.dropout, self.dropout_rng, train)

        ctxv = T.matmul(probs, v)
        b, s = ctxv.shape[0], ctxv.shape[2]
        merged = T.reshape(T.transpose(ctxv, (0, 2, 1, 3)), (b, s, cfg.num_heads * cfg.d_v))
        merged = self._q(f"{base}.output", merged, train, q_keep)
        return T.matmul(merged, self._qw(f"{base}.wo.w", train))

    def _layer_norm(self, base: str, x: Tensor, train: bool, keep) -> Tensor:
        mu, var = T.layer_stats(x, axis=-1)
        num = T.sub(x, mu)
        num = self._q(f"{base}.numerator", num, train, keep)
        den = T.sqrt(var + self.cfg.layernorm_eps)
        den = self._q(f"{base}.denominator", den, train, keep)
        quot = T.div(num, den)
        quot = self._q(f"{base}.quotient", quot, train, keep)
        out = T.add(T.mul(quot, self._qw(f"{base}.gamma", train)), self.params[f"{base}.beta"])
        return self._q(f"{base}.output", out, train, keep)

    def _feed_forward(self, base: str, x: Tensor, train: bool, keep) -> Tensor:
        h = T.matmul(x, self._qw(f"{base}.w1.w", train)) + self.params[f"{base}.w1.b"]
        h = T.relu(h)
        if self.capture_relu:
            self.relu_capture[base] = h.data
        h = self._q(f"{base}.relu", h, train, keep)
        h = T.dropout(h, self.cfg.dropout, self.dropout_rng, train)
        y = T.matmul(h, self._qw(f"{base}.w2.w", train)) + self.params[f"{base}.w2.b"]
        return self._q(f"{base}.output", y, train, keep)

    def _sublayer(self, x: Tensor, out: Tensor, ln_base: str, train: bool, keep) -> Tensor:
        out = T.dropout(out, self.cfg.dropout, self.dropout_rng, train)
        return self._layer_norm(ln_base, T.add(x, out), train, keep)

    def encode(self, src_ids: np.ndarray, src_pad: np.ndarray | None = None,
               train: bool = False, causal: bool = False, emb_q: Tensor | None = None) -> Tensor:
        if emb_q is None:
            emb_q = self.quantized_embedding(train)
        keep = None if src_pad is None else (~src_pad)[:, :, None]
        attn_mask = _attn_mask(src_pad, src_ids.shape[1], causal)
        x = self._embed(src_ids, emb_q, "encoder.embed_sum", train, keep)
        for i in range(self.cfg.num_encoder_layers):
            base = f"encoder.{i}"
            a = self._attention(f"{base}.self_attn", x, None, attn_mask, train, keep, keep)
            x = self._sublayer(x, a, f"{base}.ln1", train, keep)
            f = self._feed_forward(f"{base}.ffn", x, train, keep)
            x = self._sublayer(x, f, f"{base}.ln2", train, keep)
        return x

    def decode(self, tgt_ids: np.ndarray, memory: Tensor,
               src_pad: np.ndarray | None, tgt_pad: np.ndarray | None,
               train: bool = False, emb_q: Tensor | None = None) -> Tensor:
        if emb_q is None:
            emb_q = self.quantized_embedding(train)
        s_tgt = tgt_ids.shape[1]
        keep = None if tgt_pad is None else (~tgt_pad)[:, :, None]
        mem_keep = None if src_pad is None else (~src_pad)[:, :, None]
        self_mask = _attn_mask(tgt_pad, s_tgt, causal=True)
        cross_mask = _attn_mask(src_pad, None, causal=False)
        x = self._embed(tgt_ids, emb_q, "decoder.embed_sum", train, keep)
        for i in range(self.cfg.num_decoder_layers):
            base = f"decoder.{i}"
            a = self._attention(f"{base}.self_attn", x, None, self_mask, train, keep, keep)
            x = self._sublayer(x, a, f"{base}.ln1", train, keep)
            c = self._attention(f"{base}.cross_attn", x, memory, cross_mask, train, keep, mem_keep)
            x = self._sublayer(x, c, f"{base}.ln2", train, keep)
            f = self._feed_forward(f"{base}.ffn", x, train, keep)
            x = self._sublayer(x, f, f"{base}.ln3", train, keep)
        return self._project(x, emb_q, train)

    def _project(self, x: Tensor, emb_q: Tensor, train: bool) -> Tensor:
        if self.cfg.share_embedding:
            logits = T.matmul(x, T.transpose(emb_q, (1, 0)))
        else:
            logits = T.matmul(x, self._qw("output_projection.w", train))
        if self.cfg.output_bias:
            logits = T.add(logits, self.params["output_projection.b"])
        return logits

    def forward(self, src_ids, src_pad, tgt_ids, tgt_pad, train: bool = False) -> Tensor:
        emb_q = self.quantized_embedding(train)
        memory = self.encode(src_ids, src_pad, train, emb_q=emb_q)
        return self.decode(tgt_ids, memory, src_pad, tgt_pad, train, emb_q=emb_q)

    def forward_lm(self, tokens: np.ndarray, train: bool = False) -> Tensor:
        """Causal encoder-only language model over (batch, seq) token windows."""
        emb_q = self.quantized_embedding(train)
        x = self.encode(tokens, None, train, causal=True, emb_q=emb_q)
        return self._project(x, emb_q, train)

    # -- losses -------------------------------------------------------------------

    def loss_seq2seq(self, batch, train: bool = False):
        logits = self.forward(batch.src, batch.src_pad, batch.tgt_in, batch.tgt_pad, train)
        return T.cross_entropy(logits, batch.tgt_out, keep_mask=~batch.tgt_pad,
                               smoothing=self.cfg.label_smoothing)

    def loss_lm(self, inputs: np.ndarray, targets: np.ndarray, target_mask=None,
                train: bool = False):
        logits = self.forward_lm(inputs, train)
        return T.cross_entropy(logits, targets, keep_mask=target_mask, smoothing=0.0)

    # -- state --------------------------------------------------------------------

    def state(self) -> dict:
        return {
            "weights": {n: p.data.copy() for n, p in self.params.items()},
            "points": {n: p.state() for n, p in self.points.items()},
            "dropout_rng": self.dropout_rng.get_state(),
        }

    def load_state(self, st: dict) -> None:
        for n, arr in st["weights"].items():
            self.params[n].data = np.asarray(arr, dtype=self.dtype).copy()
        for n, ps in st["points"].items():
            self.points[n].load_state(ps)
        if st.get("dropout_rng") is not None:
            self.dropout_rng.set_state(st["dropout_rng"])


def _bview(params, ndim, axis):
    arr = np.asarray(params)
    if axis is None or arr.ndim == 0:
        return arr
    shape = [1] * ndim
    shape[axis % ndim] = arr.shape[0]
    return arr.reshape(shape)


def _attn_mask(pad: np.ndarray | None, seq: int | None, causal: bool):
    """Boolean (B|1, 1, Sq|1, Sk) mask, True where attention is disallowed."""
    mask = None
    if pad is not None:
        mask = pad[:, None, None, :]
    if causal:
        tri = np.triu(np.ones((seq, seq), dtype=bool), 1)[None, None]
        mask = tri if mask is None else (mask | tri)
    return mask


# -- structural check -----------------------------------------------------------

_TRANSPARENT = {"dropout", "transpose", "reshape", "concat", "split", "scale",
                "masked_fill", "embedding"}


def find_unquantized_matmuls(root: Tensor) -> list[str]:
    """Walk the recorded op graph and report matmuls with an operand that is
    not integer-representable.

    An operand counts as quantized if it is a fake-quant output, a matmul of
    quantized operands (an integer-accumulator result), or a value-preserving
    transform (dropout, reshape, masking, scaling, gather) of one.
    """
    memo: dict[int, bool] = {}

    def rep(node: Tensor) -> bool:
        key = id(node)
        if key in memo:
            return memo[key]
        memo[key] = False  # break cycles defensively
        if node.op == "fake_quant":
            out = True
        elif node.op == "matmul":
            out = all(rep(p) for p in node.parents)
        elif node.op in _TRANSPARENT:
            out = all(rep(p) for p in node.parents)
        else:
            out = False
        memo[key] = out
        return out

    violations = []
    seen = set()
    stack = [root]
    order = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node.parents)
    for node in order:
        if node.op == "matmul":
            for i, p in enumerate(node.parents):
                if not rep(p):
                    side = "lhs" if i == 0 else "rhs"
                    violations.append(f"matmul {side} <- {p.op}"
                                      + (f" [{p.label}]" if p.label else ""))
    return violations


# -- decoding ---------------------------------------------------------------------

def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def beam_search(model: QuantTransformer, src_ids, *, beam: int = 4, alpha: float = 0.6,
                max_len: int | None = None, bos: int = 1, eos: int = 2) -> list[int]:
    """Beam decode one source sentence; hypotheses are scored by summed log
    probability divided by the GNMT length penalty, ties broken by token ids."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    if max_len is None:
        max_len = model.cfg.max_len - 1
    with T.no_grad():
        emb_q = model.quantized_embedding(train=False)
        memory = model.encode(src, None, train=False, emb_q=emb_q)
        alive = [((bos,), 0.0)]
        finished: list[tuple[tuple, float]] = []
        for _ in range(max_len):
            prefixes = np.array([h[0] for h in alive], dtype=np.int64)
            mem = Tensor(np.repeat(memory.data, len(alive), axis=0))
            logits = model.decode(prefixes, mem, None, None, train=False, emb_q=emb_q)
            last = logits.data[:, -1, :].astype(np.float64)
            last = last - last.max(axis=-1, keepdims=True)
            logp = last - np.log(np.exp(last).sum(axis=-1, keepdims=True))
            candidates = []
            for (toks, score), row in zip(alive, logp):
                for tok in range(row.shape[0]):
                    candidates.append((toks + (tok,), score + float(row[tok])))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            alive = []
            for toks, score in candidates:
                if toks[-1] == eos:
                    gen = len(toks) - 1
                    finished.append((toks, score / length_penalty(gen, alpha)))
                elif len(alive) < beam:
                    alive.append((toks, score))
                if len(alive) == beam:
                    # enough continuations; later candidates only score worse
                    break
            if not alive:
                break
        for toks, score in alive:
            gen = len(toks) - 1
            finished.append((toks, score / length_penalty(gen, alpha)))
        finished.sort(key=lambda c: (-c[1], c[0]))
        best = finished[0][0]
    out = list(best[1:])
    if out and out[-1] == eos:
        out = out[:-1]
    return out
