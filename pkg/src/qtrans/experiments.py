"""End-to-end experiment drivers shared by the CLI and the test harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .data import EOS, Vocab, batch_stream, batches_once, synthetic_task
from .metrics import bleu
from .model import ModelConfig, QuantTransformer, beam_search
from .tensor import NumericError
from .train import (
    DivergenceError,
    Regime,
    TrainConfig,
    apply_regime_toggles,
    post_quantize,
    train_translation,
    validate_seq2seq,
)


@dataclass
class ToyTask:
    """Synthetic parallel corpus with fixed held-out splits."""

    kind: str
    vocab: Vocab
    train_pairs: list
    val_pairs: list
    test_pairs: list


def make_toy_task(kind: str = "reverse", vocab_size: int = 100,
                  length_range=(4, 10), train_pairs: int = 3000,
                  val_pairs: int = 200, test_pairs: int = 300,
                  data_seed: int = 1234, test_length_range=None) -> ToyTask:
    """Build fixed train/val/test splits.  A separate test length range can
    stress length generalization so metrics stay off the 100-BLEU ceiling."""
    total = train_pairs + val_pairs
    pairs = synthetic_task(kind, vocab_size, length_range, total, seed=data_seed)
    test = synthetic_task(kind, vocab_size, test_length_range or length_range,
                          test_pairs, seed=data_seed + 1)
    vocab = Vocab([f"w{i:03d}" for i in range(vocab_size)])
    return ToyTask(kind, vocab, pairs[:train_pairs], pairs[train_pairs:], test)


def decode_corpus_bleu(model: QuantTransformer, pairs, vocab: Vocab,
                       beam: int = 4, alpha: float = 0.6) -> float:
    """Beam-decode every source sentence and score corpus BLEU."""
    hyps = []
    refs = []
    for src, tgt in pairs:
        ids = vocab.encode(src) + [EOS]
        out = beam_search(model, ids, beam=beam, alpha=alpha,
                          max_len=min(len(src) + 3, model.cfg.max_len - 1))
        hyps.append(vocab.decode(out))
        refs.append(tgt)
    return bleu(hyps, refs)


@dataclass
class RunResult:
    regime: str
    seed: int
    status: str = "ok"  # ok | diverged
    diverged_at: int | None = None
    bleu: float | None = None
    val: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    model: QuantTransformer | None = None


def run_translation(task: ToyTask, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    regime_str: str, seed: int, *, beam: int = 4, alpha: float = 0.6,
                    post_trials: int = 5, post_steps: int = 200,
                    eval_bleu: bool = True, log_file=None) -> RunResult:
    """Train one configuration under one regime and score the test split.

    Test metrics always come from the checkpoint with the best validation
    loss; QAT regimes are frozen before the final evaluation.
    """
    regime = Regime.parse(regime_str) if regime_str != "post" else Regime.parse("none")
    is_post = regime_str == "post"
    model = QuantTransformer(model_cfg, seed=seed, naive=regime.naive)
    apply_regime_toggles(model, regime)
    train_iter = batch_stream(task.train_pairs, task.vocab, train_cfg.batch_size,
                              seed=seed)
    val_batches = batches_once(task.val_pairs, task.vocab, train_cfg.batch_size)
    result = RunResult(regime=regime_str, seed=seed)
    try:
        res = train_translation(model, train_iter, val_batches, train_cfg, regime,
                                log_file=log_file)
    except DivergenceError as e:
        result.status = "diverged"
        result.diverged_at = e.step
        return result
    except NumericError:
        # e.g. a quantized LayerNorm denominator hit exactly zero
        result.status = "diverged"
        return result
    result.history = res.history
    result.val_history = res.val_history
    model.load_state(res.best_state)

    if is_post:
        model = _best_post_quantized(model, task, train_cfg, seed,
                                     trials=post_trials, steps=post_steps)
    elif regime.quant_from is not None and model.cfg.precision < 32:
        model.set_quant_active(True)
        model.freeze_quantization()
    else:
        model.set_quant_active(False)

    quant_active = model.cfg.precision < 32 and (is_post or regime.quant_from is not None)
    model.set_quant_active(quant_active)
    test_batches = batches_once(task.test_pairs, task.vocab, train_cfg.batch_size)
    result.val = validate_seq2seq(model, test_batches, quant_active)
    if eval_bleu:
        result.bleu = decode_corpus_bleu(model, task.test_pairs, task.vocab,
                                         beam=beam, alpha=alpha)
    result.model = model
    return result


def _best_post_quantized(fp_model: QuantTransformer, task: ToyTask,
                         train_cfg: TrainConfig, seed: int, trials: int,
                         steps: int) -> QuantTransformer:
    """Run several calibration trials and keep the best by validation loss."""
    if trials < 1:
        raise ValueError("post-quantization needs at least one trial")
    val_batches = batches_once(task.val_pairs, task.vocab, train_cfg.batch_size)
    state = fp_model.state()
    best = None
    best_loss = math.inf
    for t in range(trials):
        model = QuantTransformer(fp_model.cfg, seed=seed)
        model.load_state(state)
        calib = batch_stream(task.train_pairs, task.vocab, train_cfg.batch_size,
                             seed=seed * 1000 + 17 * t + 1)
        batches = [next(calib) for _ in range(steps)]
        post_quantize(model, batches, n_steps=steps)
        val = validate_seq2seq(model, val_batches, quant_active=True)
        if val["loss"] < best_loss:
            best_loss = val["loss"]
            best = model
    return best
