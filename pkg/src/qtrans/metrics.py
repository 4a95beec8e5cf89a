"""Evaluation metrics and analytic model-size accounting.

Sizes are counted in bits ("Gb" readouts are decimal gigabits): quantized
weights at k bits; biases, LayerNorm beta, and every per-bucket (s, x_min)
pair at 32 bits each.  Positional encodings are computable on the fly and
are excluded from storage accounting.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .model import ModelConfig, build_layout


def perplexity(nll_sum: float, tokens: int) -> float:
    """Per-token perplexity from a summed negative log likelihood."""
    if tokens <= 0:
        raise ValueError("perplexity needs a positive token count")
    return math.exp(nll_sum / tokens)


def token_accuracy(correct: int, tokens: int) -> float:
    if tokens <= 0:
        raise ValueError("accuracy needs a positive token count")
    return correct / tokens


# -- BLEU -----------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references) -> float:
    """Corpus BLEU-4 with the multi-bleu.pl conventions: modified n-gram
    precision counts pooled over the corpus, no smoothing, brevity penalty
    exp(1 - r/c) when c < r.  Returns a score in [0, 100]."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference line counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    cand_toks = [c.split() if isinstance(c, str) else list(c) for c in candidates]
    ref_toks = [r.split() if isinstance(r, str) else list(r) for r in references]

    matched = [0] * 4
    total = [0] * 4
    c_len = 0
    r_len = 0
    for cand, ref in zip(cand_toks, ref_toks):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())

    if any(m == 0 or t == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_prec)


# -- size accounting --------------------------------------------------------------


@dataclass
class SizeReport:
    precision: int
    bucketing: bool
    quantized_weight_params: int
    quantized_weight_bits: int
    bias_params: int
    bias_bits: int
    ln_beta_params: int
    ln_beta_bits: int
    scalar_pairs: int
    scalar_bits: int
    total_bits: int
    fp32_total_bits: int
    compression: float
    ff_weight_fraction: float
    bias_share: float

    @property
    def total_gb(self) -> float:
        return self.total_bits / 1e9

    @property
    def fp32_total_gb(self) -> float:
        return self.fp32_total_bits / 1e9

    def text(self) -> str:
        lines = [
            f"precision: {self.precision}-bit (bucketing {'on' if self.bucketing else 'off'})",
            f"quantized weights: {self.quantized_weight_params} params, {self.quantized_weight_bits} bits",
            f"biases: {self.bias_params} params, {self.bias_bits} bits",
            f"layernorm beta: {self.ln_beta_params} params, {self.ln_beta_bits} bits",
            f"range scalars: {self.scalar_pairs} (s, x_min) pairs, {self.scalar_bits} bits",
            f"total: {self.total_bits} bits = {self.total_gb:.4f} Gb ({self.total_bits / 8e6:.2f} MB)",
            f"32-bit total: {self.fp32_total_bits} bits = {self.fp32_total_gb:.4f} Gb",
            f"compression: {self.compression:.2f}x",
            f"feed-forward weight fraction: {100 * self.ff_weight_fraction:.2f}%",
            f"bias share of weights: {100 * self.bias_share:.4f}%",
        ]
        return "\n".join(lines)

    def csv_row(self) -> str:
        return (f"{self.precision},{int(self.bucketing)},{self.total_bits},"
                f"{self.fp32_total_bits},{self.compression:.4f},"
                f"{self.ff_weight_fraction:.6f},{self.bias_share:.8f}")

    @staticmethod
    def csv_header() -> str:
        return "precision,bucketing,total_bits,fp32_total_bits,compression,ff_fraction,bias_share"


def size_report(cfg: ModelConfig, precision: int | None = None, bucketing: bool = True,
                ff_dims: dict | None = None) -> SizeReport:
    """Analytic bit accounting for a model configuration."""
    k = cfg.precision if precision is None else precision
    if k not in (4, 6, 8, 32):
        raise ValueError(f"precision must be 4, 6, 8 or 32, got {k}")
    layout = build_layout(cfg, bucketing, ff_dims)

    qw_params = 0
    bias_params = 0
    beta_params = 0
    pairs = 0
    ff_weights = 0
    denom_weights = 0
    for w in layout.weights:
        if w.name == "positional_encoding":
            continue  # recomputed at load time, never stored
        n = math.prod(w.shape)
        if w.quantized:
            qw_params += n
            if k < 32:
                pairs += w.buckets
            if w.tag == "ffn_weights":
                ff_weights += n
            if w.tag in ("embedding", "attention_weights", "ffn_weights", "output_projection"):
                denom_weights += n
        elif w.name.endswith(".beta"):
            beta_params += n
        else:
            bias_params += n
    if k < 32:
        for a in layout.acts:
            pairs += a.buckets

    qw_bits = qw_params * k
    bias_bits = bias_params * 32
    beta_bits = beta_params * 32
    scalar_bits = pairs * 2 * 32
    total = qw_bits + bias_bits + beta_bits + scalar_bits
    fp32_total = (qw_params + bias_params + beta_params) * 32
    return SizeReport(
        precision=k,
        bucketing=bucketing,
        quantized_weight_params=qw_params,
        quantized_weight_bits=qw_bits,
        bias_params=bias_params,
        bias_bits=bias_bits,
        ln_beta_params=beta_params,
        ln_beta_bits=beta_bits,
        scalar_pairs=pairs,
        scalar_bits=scalar_bits,
        total_bits=total,
        fp32_total_bits=fp32_total,
        compression=fp32_total / total,
        ff_weight_fraction=ff_weights / denom_weights,
        bias_share=(bias_params + beta_params) / qw_params,
    )
