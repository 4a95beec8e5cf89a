"""Training loop, optimizers, schedules, and the quantization regimes.

Regimes: `fullyqt` quantizes from the first step, `delayed:N` from step N,
`post` trains in full precision and calibrates ranges afterwards, `none`
never quantizes, `default-naive` quantizes everything with per-batch
symmetric ranges (the failure mode the proper scheme avoids), and
`weights-only` disables every activation point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import perplexity
from .model import ACTIVATION_TAGS, QuantTransformer
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def lr_schedule(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Inverse-sqrt schedule with linear warmup."""
    if step < 1:
        raise ValueError(f"schedule is defined for step >= 1, got {step}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("clip norm must be positive")
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = np.sqrt(v / bc2)
            update += self.eps
            np.divide(m / bc1, update, out=update)
            update *= lr
            p.data -= update.astype(p.data.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t,
                "m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}}

    def load_state(self, st: dict) -> None:
        self.t = int(st["t"])
        for n in self.m:
            self.m[n] = np.asarray(st["m"][n]).copy()
            self.v[n] = np.asarray(st["v"][n]).copy()


class Sgd:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.data.dtype)

    def state(self) -> dict:
        return {}

    def load_state(self, st) -> None:
        pass


@dataclass
class Regime:
    """Parsed quantization regime."""

    name: str
    quant_from: int | None  # first quantized training step, None = never
    naive: bool = False
    weights_only: bool = False
    post: bool = False

    MIN_DELAY = 100

    @classmethod
    def parse(cls, text: str, allow_early: bool = False) -> "Regime":
        text = text.strip()
        if text == "fullyqt":
            return cls("fullyqt", 1)
        if text == "none":
            return cls("none", None)
        if text == "post":
            return cls("post", None, post=True)
        if text == "default-naive":
            return cls("default-naive", 1, naive=True)
        if text == "weights-only":
            return cls("weights-only", 1, weights_only=True)
        if text.startswith("delayed:"):
            n = int(text.split(":", 1)[1])
            if n < cls.MIN_DELAY and not allow_early:
                raise ValueError(
                    f"delayed quantization start {n} < {cls.MIN_DELAY}; running range "
                    "estimates need a few steps (pass allow_early to override)")
            return cls(f"delayed:{n}", n)
        raise ValueError(f"unknown quantization regime {text!r}")

    def active_at(self, step: int, precision: int) -> bool:
        return (self.quant_from is not None and step >= self.quant_from
                and precision < 32)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    warmup: int = 2000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps_opt: float = 1e-9
    clip_norm: float = 1.0
    val_interval: int = 500
    seed: int = 0
    # LM task (plain SGD with epoch-driven annealing)
    optimizer: str = "adam"
    lr: float = 5.0
    epochs: int = 10
    anneal_factor: float = 4.0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_val_loss: float = math.inf
    best_state: dict | None = None
    best_step: int = 0
    diverged_at: int | None = None


def train_step(model: QuantTransformer, batch, step: int, cfg: TrainConfig,
               opt, regime: Regime) -> dict:
    """One optimizer update; raises DivergenceError on a non-finite loss."""
    active = regime.active_at(step, model.cfg.precision)
    model.set_quant_active(active)
    loss, stats = model.loss_seq2seq(batch, train=True)
    val = float(loss.data)
    if not math.isfinite(val):
        raise DivergenceError(step, val)
    model.zero_grad()
    loss.backward()
    gnorm = _maybe_clip(model.parameters().values(), cfg.clip_norm)
    lr = lr_schedule(step, model.cfg.d_model, cfg.warmup, cfg.lr_scale)
    opt.step(lr)
    return {"step": step, "loss": val, "lr": lr, "grad_norm": gnorm,
            "quantized": active, **stats}


def _maybe_clip(params, clip_norm: float) -> float:
    """clip_norm <= 0 disables clipping (the ablation variant) but the
    global norm is still measured for the log."""
    params = list(params)
    if clip_norm > 0:
        return clip_grad_norm(params, clip_norm)
    return clip_grad_norm(params, math.inf)


def validate_seq2seq(model: QuantTransformer, batches, quant_active: bool) -> dict:
    """Teacher-forced eval: loss, per-token perplexity, token accuracy.
    Tracker estimates are read, never updated."""
    model.set_quant_active(quant_active)
    tot_nll = 0.0
    tot_loss = 0.0
    tokens = 0
    correct = 0
    with T.no_grad():
        for b in batches:
            loss, stats = model.loss_seq2seq(b, train=False)
            tot_loss += float(loss.data) * stats["tokens"]
            tot_nll += stats["nll_sum"]
            tokens += stats["tokens"]
            correct += stats["correct"]
    return {"loss": tot_loss / tokens, "ppl": perplexity(tot_nll, tokens),
            "acc": correct / tokens, "tokens": tokens}


def train_translation(model: QuantTransformer, train_iter, val_batches,
                      cfg: TrainConfig, regime: Regime, log_file=None) -> TrainResult:
    """Fixed-step training with periodic validation and best-state tracking.

    Validation runs quantized exactly when the current step is quantized, so
    delayed regimes are never evaluated against uninitialized trackers.
    """
    params = model.parameters()
    if cfg.optimizer == "adam":
        opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps_opt)
    else:
        opt = Sgd(params)
    res = TrainResult()
    for step in range(1, cfg.steps + 1):
        batch = next(train_iter)
        rec = train_step(model, batch, step, cfg, opt, regime)
        res.history.append(rec)
        if log_file is not None:
            log_file.write(format_log_record(rec) + "\n")
        if step % cfg.val_interval == 0 or step == cfg.steps:
            active = regime.active_at(step, model.cfg.precision)
            val = validate_seq2seq(model, val_batches, active)
            val["step"] = step
            res.val_history.append(val)
            # delayed regimes select only among final-phase checkpoints, so
            # the chosen model always has initialized range estimates
            final_phase = active == regime.active_at(cfg.steps, model.cfg.precision)
            if final_phase and val["loss"] < res.best_val_loss:
                res.best_val_loss = val["loss"]
                res.best_state = model.state()
                res.best_step = step
    return res


def format_log_record(rec: dict) -> str:
    return (f"step={rec['step']} loss={rec['loss']:.6f} lr={rec['lr']:.8e} "
            f"grad_norm={rec['grad_norm']:.6f} quantized={int(rec['quantized'])}")


def post_quantize(model: QuantTransformer, calib_batches, n_steps: int = 300,
                  lm: bool = False) -> QuantTransformer:
    """Calibrate ranges on a trained full-precision model, weights fixed.

    Runs dropout-free forward passes with tracker updates enabled, then
    freezes every range.  Weights are bit-identical before and after.
    """
    if model.cfg.precision >= 32:
        raise ValueError("post-quantization needs a sub-32-bit precision")
    if n_steps < 1:
        raise ValueError("post-quantization needs at least one calibration step")
    if n_steps < 100:
        warnings.warn(f"calibrating over only {n_steps} steps; running range "
                      "estimates need a few hundred", RuntimeWarning)
    model.set_quant_active(True)
    saved_dropout = model.cfg.dropout
    model.cfg.dropout = 0.0
    done = 0
    with T.no_grad():
        while done < n_steps:
            progressed = False
            for b in calib_batches:
                if lm:
                    inp, tgt, keep = b
                    model.loss_lm(inp, tgt, keep, train=True)
                else:
                    model.loss_seq2seq(b, train=True)
                done += 1
                progressed = True
                if done >= n_steps:
                    break
            if not progressed:
                raise ValueError("empty calibration stream")
    model.cfg.dropout = saved_dropout
    model.freeze_quantization()
    return model


def apply_regime_toggles(model: QuantTransformer, regime: Regime) -> None:
    if regime.weights_only:
        model.set_points_enabled(ACTIVATION_TAGS, False)


# -- language modeling -----------------------------------------------------------


def evaluate_lm(model: QuantTransformer, windows, quant_active: bool) -> dict:
    model.set_quant_active(quant_active)
    tot_nll = 0.0
    tokens = 0
    with T.no_grad():
        for inp, tgt, keep in windows:
            _, stats = model.loss_lm(inp, tgt, keep, train=False)
            tot_nll += stats["nll_sum"]
            tokens += stats["tokens"]
    return {"loss": tot_nll / tokens, "ppl": perplexity(tot_nll, tokens), "tokens": tokens}


def train_lm(model: QuantTransformer, train_windows, val_windows, cfg: TrainConfig,
             regime: Regime, log_file=None) -> TrainResult:
    """Epoch-driven LM training: plain SGD, gradient clipping, and learning
    rate annealed by `anneal_factor` whenever validation fails to improve."""
    opt = Sgd(model.parameters())
    lr = cfg.lr
    res = TrainResult()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for inp, tgt, keep in train_windows:
            step += 1
            active = regime.active_at(step, model.cfg.precision)
            model.set_quant_active(active)
            loss, stats = model.loss_lm(inp, tgt, keep, train=True)
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError(step, val)
            model.zero_grad()
            loss.backward()
            gnorm = _maybe_clip(model.parameters().values(), cfg.clip_norm)
            opt.step(lr)
            rec = {"step": step, "loss": val, "lr": lr, "grad_norm": gnorm,
                   "quantized": active}
            res.history.append(rec)
            if log_file is not None:
                log_file.write(format_log_record(rec) + "\n")
        active = regime.active_at(step, model.cfg.precision)
        val = evaluate_lm(model, val_windows, active)
        val["epoch"] = epoch
        res.val_history.append(val)
        if val["loss"] < res.best_val_loss:
            res.best_val_loss = val["loss"]
            res.best_state = model.state()
            res.best_step = step
        else:
            lr /= cfg.anneal_factor
    return res
