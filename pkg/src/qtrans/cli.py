"""Command-line front end: train / eval / post-quantize / ablate / prune /
size-report.  Batch-oriented: every command writes text and CSV artifacts
into an output directory.  Honored environment variables: THREADS (worker
processes for trial/ablation grids) and LOG_LEVEL."""

from __future__ import annotations

import argparse
import logging
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .data import batches_once, batch_stream, lm_batchify, lm_vocab, lm_windows, load_lm_tokens
from .experiments import ToyTask, decode_corpus_bleu, make_toy_task
from .metrics import SizeReport, size_report
from .model import (
    ACTIVATION_TAGS,
    BUCKETED_ACT_TAGS,
    WEIGHT_TAGS,
    QuantTransformer,
    base_config,
    big_config,
    lm_config,
)
from .prune import (
    adaptive_prune_mask,
    apply_prune,
    estimate_node_xmax,
    fixed_prune_mask,
    histogram_csv,
    PruneReport,
)
from .quant import StateError
from .tensor import NumericError
from .train import (
    DivergenceError,
    Regime,
    TrainConfig,
    apply_regime_toggles,
    evaluate_lm,
    post_quantize,
    train_lm,
    train_translation,
    validate_seq2seq,
)

log = logging.getLogger("qtrans")

EXIT_CONFIG = 1
EXIT_DIVERGED = 3
EXIT_STATE = 4


class CliError(RuntimeError):
    def __init__(self, kind: str, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.kind = kind
        self.code = code


def _threads() -> int:
    return max(1, int(os.environ.get("THREADS", "1")))


def _toy_task(cfg: ExperimentConfig) -> ToyTask:
    d = cfg.data
    return make_toy_task(
        kind=d.get("kind", "reverse"),
        vocab_size=d.get("vocab", 100),
        length_range=(d.get("min_len", 4), d.get("max_len", 10)),
        train_pairs=d.get("train_pairs", 3000),
        val_pairs=d.get("val_pairs", 200),
        test_pairs=d.get("test_pairs", 300),
        data_seed=d.get("seed", 1234),
    )


def _configure_model(cfg: ExperimentConfig, vocab_size: int) -> QuantTransformer:
    regime = Regime.parse(cfg.regime, allow_early=cfg.allow_early_quant)
    model = QuantTransformer(cfg.model_config(vocab_size), seed=cfg.seed,
                             bucketing=cfg.bucketing, naive=regime.naive)
    if cfg.only_points:
        model.enable_only(cfg.only_points)
    if cfg.disable_points:
        model.set_points_enabled(cfg.disable_points, False)
    apply_regime_toggles(model, regime)
    return model


def _lm_data(cfg: ExperimentConfig):
    d = cfg.data
    for key in ("train_path", "valid_path", "test_path"):
        if key not in d:
            raise CliError("config", f"lm task needs data.{key}")
    train_toks = load_lm_tokens(d["train_path"])
    vocab = lm_vocab(train_toks)
    lanes = d.get("lanes", 20)
    seq = d.get("seq_len", 35)

    def windows(path):
        toks = load_lm_tokens(path)
        return lm_windows(lm_batchify(vocab.encode(toks), lanes), seq)

    return vocab, windows(d["train_path"]), windows(d["valid_path"]), windows(d["test_path"])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    regime = Regime.parse(cfg.regime, allow_early=cfg.allow_early_quant)
    tcfg = cfg.train_config()

    if cfg.task == "lm":
        vocab, train_w, val_w, test_w = _lm_data(cfg)
        model = _configure_model(cfg, len(vocab))
        with open(out / "metrics.log", "w") as f:
            res = train_lm(model, train_w, val_w, tcfg, regime, log_file=f)
        model.load_state(res.best_state)
        active = model.cfg.precision < 32 and regime.quant_from is not None
        if active:
            model.set_quant_active(True)
            model.freeze_quantization()
        test = evaluate_lm(model, test_w, active)
        save_checkpoint(out / "best.ckpt", model, step=res.best_step,
                        metrics={"val_loss": res.best_val_loss, "test_ppl": test["ppl"]})
        print(f"best val loss {res.best_val_loss:.4f}  test ppl {test['ppl']:.2f}")
        _write_val_history(out, res.val_history)
        return 0

    task = _toy_task(cfg)
    model = _configure_model(cfg, len(task.vocab))
    train_iter = batch_stream(task.train_pairs, task.vocab, tcfg.batch_size, seed=cfg.seed)
    val_batches = batches_once(task.val_pairs, task.vocab, tcfg.batch_size)
    with open(out / "metrics.log", "w") as f:
        res = train_translation(model, train_iter, val_batches, tcfg, regime, log_file=f)
    _write_val_history(out, res.val_history)
    save_checkpoint(out / "final.ckpt", model, step=tcfg.steps,
                    metrics={"val_loss": res.val_history[-1]["loss"]})
    model.load_state(res.best_state)
    save_checkpoint(out / "best.ckpt", model, step=res.best_step,
                    metrics={"val_loss": res.best_val_loss})
    print(f"trained {tcfg.steps} steps; best val loss {res.best_val_loss:.4f} "
          f"at step {res.best_step}")
    return 0


def _write_val_history(out: Path, history) -> None:
    if not history:
        return
    keys = sorted(history[0])
    lines = [",".join(keys)]
    lines += [",".join(str(rec[k]) for k in keys) for rec in history]
    (out / "validation.csv").write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    quant_active = model.cfg.precision < 32
    model.set_quant_active(quant_active)

    if cfg.task == "lm":
        vocab, _, val_w, test_w = _lm_data(cfg)
        if len(vocab) != model.cfg.vocab_size:
            raise CliError("state", f"vocab size {len(vocab)} does not match "
                           f"checkpoint model ({model.cfg.vocab_size})", EXIT_STATE)
        split = val_w if args.split == "valid" else test_w
        res = evaluate_lm(model, split, quant_active)
        print(f"loss={res['loss']:.4f} ppl={res['ppl']:.2f} tokens={res['tokens']}")
        return 0

    task = _toy_task(cfg)
    if len(task.vocab) != model.cfg.vocab_size:
        raise CliError("state", f"vocab size {len(task.vocab)} does not match "
                       f"checkpoint model ({model.cfg.vocab_size})", EXIT_STATE)
    pairs = task.val_pairs if args.split == "valid" else task.test_pairs
    if args.ppl or not args.bleu:
        batches = batches_once(pairs, task.vocab, 32)
        res = validate_seq2seq(model, batches, quant_active)
        print(f"loss={res['loss']:.4f} ppl={res['ppl']:.4f} acc={res['acc']:.4f}")
    if args.bleu:
        score = decode_corpus_bleu(model, pairs, task.vocab, beam=args.beam,
                                   alpha=args.alpha)
        print(f"bleu={score:.2f}")
    return 0


def cmd_post_quantize(args) -> int:
    if args.trials < 1:
        raise CliError("config", "post-quantize needs trials >= 1")
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = ckpt.build_model()
    if base.cfg.precision >= 32:
        raise CliError("config", "checkpoint is full-precision; re-train with a "
                       "sub-32-bit model.precision to post-quantize")
    task = _toy_task(cfg)
    weights_before = {n: p.data.copy() for n, p in base.params.items()}
    state = base.state()
    val_batches = batches_once(task.val_pairs, task.vocab, 32)
    rows = ["trial,val_loss,val_ppl"]
    best, best_loss, best_trial = None, float("inf"), -1
    for t in range(args.trials):
        model = QuantTransformer(base.cfg, seed=cfg.seed, bucketing=base.bucketing)
        model.load_state(state)
        calib = batch_stream(task.train_pairs, task.vocab, 32,
                             seed=cfg.seed * 1000 + 17 * t + 1)
        post_quantize(model, [next(calib) for _ in range(args.steps)],
                      n_steps=args.steps)
        val = validate_seq2seq(model, val_batches, quant_active=True)
        rows.append(f"{t},{val['loss']:.6f},{val['ppl']:.4f}")
        if val["loss"] < best_loss:
            best, best_loss, best_trial = model, val["loss"], t
    for n, arr in weights_before.items():
        assert np.array_equal(arr, best.params[n].data), "weights changed during calibration"
    (out / "trials.csv").write_text("\n".join(rows) + "\n")
    save_checkpoint(out / "post.ckpt", best, step=ckpt.step,
                    metrics={"val_loss": best_loss, "trial": best_trial})
    print(f"kept trial {best_trial} of {args.trials} (val loss {best_loss:.4f})")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    points = [p.strip() for p in args.points.split(",") if p.strip()]
    valid = set(WEIGHT_TAGS) | set(ACTIVATION_TAGS)
    combined_all = points == ["all"]
    unknown = [] if combined_all else [p for p in points if p not in valid]
    if unknown:
        raise CliError("config", f"unknown quant point(s) {unknown}; "
                       f"valid names: {sorted(valid)}")
    bucketable = set(BUCKETED_ACT_TAGS) | set(WEIGHT_TAGS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = _toy_task(cfg)
    tcfg = cfg.train_config()
    rows = ["point,bucketing,status,val_loss,val_ppl,bleu"]
    if combined_all:
        # every point enabled at once: the fullyqt regime in a single row
        bucketing = args.bucketing != "off"
        rows.append(_ablate_cell(cfg, task, tcfg, sorted(valid), bucketing, label="all"))
        (out / "ablation.csv").write_text("\n".join(rows) + "\n")
        print("\n".join(rows))
        return 0
    cells = []
    for point in points:
        if args.bucketing == "both":
            settings = [False, True] if point in bucketable else [False]
        elif args.bucketing == "on":
            if point not in bucketable:
                raise CliError("config",
                               f"{point} cannot be bucketed: its range is a "
                               "per-batch scalar, there is no stable axis to "
                               "split into buckets")
            settings = [True]
        else:
            settings = [False]
        cells.extend((cfg, task, tcfg, point, bucketing) for bucketing in settings)
    workers = min(_threads(), len(cells))
    if workers > 1:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            rows.extend(pool.starmap(_ablate_cell, cells))
    else:
        rows.extend(_ablate_cell(*c) for c in cells)
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    return 0


def _ablate_cell(cfg: ExperimentConfig, task: ToyTask, tcfg: TrainConfig,
                 point, bucketing: bool, label: str | None = None) -> str:
    model_cfg = cfg.model_config(len(task.vocab))
    model = QuantTransformer(model_cfg, seed=cfg.seed, bucketing=bucketing)
    model.enable_only([point] if isinstance(point, str) else point)
    point = label or point
    train_iter = batch_stream(task.train_pairs, task.vocab, tcfg.batch_size, seed=cfg.seed)
    val_batches = batches_once(task.val_pairs, task.vocab, tcfg.batch_size)
    regime = Regime.parse("fullyqt")
    try:
        res = train_translation(model, train_iter, val_batches, tcfg, regime)
    except DivergenceError as e:
        return f"{point},{int(bucketing)},diverged@{e.step},,,"
    except NumericError:
        return f"{point},{int(bucketing)},diverged,,,"
    model.load_state(res.best_state)
    model.set_quant_active(True)
    model.freeze_quantization()
    test_batches = batches_once(task.test_pairs, task.vocab, tcfg.batch_size)
    val = validate_seq2seq(model, test_batches, quant_active=True)
    score = decode_corpus_bleu(model, task.test_pairs, task.vocab,
                               beam=cfg.beam, alpha=cfg.length_penalty)
    return f"{point},{int(bucketing)},ok,{val['loss']:.4f},{val['ppl']:.4f},{score:.2f}"


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ckpt.build_model()
    quant_active = model.cfg.precision < 32
    model.set_quant_active(quant_active)
    task = _toy_task(cfg)
    train_batches = batches_once(task.train_pairs, task.vocab, 32)
    model.freeze_quantization()
    stats = estimate_node_xmax(model, train_batches, n_steps=args.steps)

    if args.method == "adaptive":
        masks = {n: adaptive_prune_mask(st, z=args.z) for n, st in stats.items()}
        parameter = args.z
    else:
        if args.ratio is None:
            raise CliError("config", f"method {args.method} needs --ratio")
        criterion = "l1" if args.method == "l1" else "xmax"
        enc_layers = [n for n in stats if n.startswith("encoder.")]
        masks = {n: fixed_prune_mask(model, n, args.ratio, criterion, stats=stats[n])
                 for n in enc_layers}
        parameter = args.ratio
    masks = {n: m for n, m in masks.items() if m.size}

    report = PruneReport(method=args.method, parameter=parameter)
    total_nodes = 0
    total_pruned = 0
    for name, st in stats.items():
        d_ff = st.x_max.shape[0]
        count = masks.get(name, np.zeros(0)).size
        thr = args.z * st.sigma if args.method == "adaptive" else float("nan")
        report.layers.append((name, d_ff, count, thr))
        total_nodes += d_ff
        total_pruned += count
    report.pruned_fraction = total_pruned / total_nodes

    val_batches = batches_once(task.val_pairs, task.vocab, 32)
    report.metric_before = validate_seq2seq(model, val_batches, quant_active)
    pruned = apply_prune(model, masks) if masks else model
    report.metric_after = validate_seq2seq(pruned, val_batches, quant_active)
    report.size_before_bits = size_report(model.cfg, model.cfg.precision,
                                          model.bucketing, model.ff_dims).total_bits
    report.size_after_bits = size_report(pruned.cfg, pruned.cfg.precision,
                                         pruned.bucketing, pruned.ff_dims).total_bits

    (out / "prune_report.txt").write_text(report.text() + "\n")
    (out / "prune_report.csv").write_text(report.csv() + "\n")
    (out / "xmax_histograms.csv").write_text(histogram_csv(stats, bins=args.bins) + "\n")
    save_checkpoint(out / "pruned.ckpt", pruned, step=ckpt.step,
                    metrics={"pruned_fraction": report.pruned_fraction})
    print(report.text())
    return 0


_PRESETS = {"base": base_config, "big": big_config, "lm": lm_config}


def cmd_size_report(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        model_cfg = cfg.model_config(args.vocab)
    else:
        model_cfg = _PRESETS[args.preset](args.vocab)
    bucketing = args.bucketing == "on"
    reports = []
    ks = [int(k) for k in args.k.split(",")]
    for k in ks:
        reports.append(size_report(model_cfg, k, bucketing))
    print("\n\n".join(r.text() for r in reports))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [SizeReport.csv_header()] + [r.csv_row() for r in reports]
        (out / "size_report.csv").write_text("\n".join(lines) + "\n")
        (out / "size_report.txt").write_text("\n\n".join(r.text() for r in reports) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtrans",
                                description="quantization-aware Transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model per an experiment config")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--bleu", action="store_true")
    e.add_argument("--ppl", action="store_true")
    e.add_argument("--beam", type=int, default=4)
    e.add_argument("--alpha", type=float, default=0.6)
    e.add_argument("--split", choices=["valid", "test"], default="test")
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("post-quantize", help="calibrate ranges on a trained model")
    q.add_argument("checkpoint")
    q.add_argument("--config", required=True)
    q.add_argument("--trials", type=int, default=20)
    q.add_argument("--steps", type=int, default=300)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_post_quantize)

    a = sub.add_parser("ablate", help="quantize single points and measure")
    a.add_argument("config")
    a.add_argument("--points", required=True, help="comma list of point tags, or 'all'")
    a.add_argument("--bucketing", choices=["both", "on", "off"], default="both")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("prune", help="estimate node ceilings and prune")
    r.add_argument("checkpoint")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=["adaptive", "l1", "xmax-fixed"], default="adaptive")
    r.add_argument("--z", type=float, default=0.025)
    r.add_argument("--ratio", type=float, default=None)
    r.add_argument("--steps", type=int, default=300)
    r.add_argument("--bins", type=int, default=30)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_prune)

    s = sub.add_parser("size-report", help="analytic size/compression accounting")
    s.add_argument("--preset", choices=sorted(_PRESETS), default="base")
    s.add_argument("--config", default=None)
    s.add_argument("--vocab", type=int, default=37000)
    s.add_argument("--k", default="32,8,6,4")
    s.add_argument("--bucketing", choices=["on", "off"], default="on")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_size_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LOG_LEVEL", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigFileError as e:
        print(f"ERROR config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"ERROR diverged: {e} (step {e.step})", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as e:
        print(f"ERROR numeric: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"ERROR checkpoint: {e}", file=sys.stderr)
        return EXIT_STATE
    except StateError as e:
        print(f"ERROR state: {e}", file=sys.stderr)
        return EXIT_STATE
    except CliError as e:
        print(f"ERROR {e.kind}: {e}", file=sys.stderr)
        return e.code
    except (FileNotFoundError, KeyError, ValueError) as e:
        print(f"ERROR invalid: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
