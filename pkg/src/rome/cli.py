"""Command-line entry point: ``rome {synth,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import plots
from . import tensor as tn
from .ablation import ablation_configs, ablation_report, format_records, format_table, parse_axes
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import GRADCHECK_DEFAULTS, RunConfig, load_run_config, parse_overrides, resolve
from .data import DataError, FUNCTION_WORDS, load_corpus, load_word_embeddings, synth_corpus, synthetic_lexicon, write_corpus
from .evaluation import DIRECTIONS, evaluate, metrics_text
from .gradcheck import GradCheckReport, finite_diff_check
from .model import RetrievalModel
from .trainer import (ConfigError, TrainingDiverged, initial_model, model_from_checkpoint, train,
                      train_config_from_checkpoint)

log = logging.getLogger("rome")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CHECKPOINT_FILE = "checkpoint.bin"
LOSS_LOG = "loss.log"
ECHO_FILE = "resolved_config.txt"


class UsageError(Exception):
    pass


def _prepare_out(out, force: bool) -> Path:
    path = Path(out)
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
        raise UsageError(f"output {path} already exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args, base: RunConfig | None = None) -> RunConfig:
    overrides = parse_overrides(getattr(args, "set", None))
    for key, attr in (("seed", "seed"), ("epochs", "epochs"), ("embedding_seed", "random_embeddings")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_run_config(getattr(args, "config", None), overrides, base)


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    corpus = synth_corpus(args.seed, args.clips, d2=args.d2, d3=args.d3, vocab_size=args.vocab_size,
                          n_classes=args.classes, captions_per_clip=args.captions_per_clip,
                          noise=args.noise, droi=args.droi)
    out = _prepare_out(args.out, args.force)
    write_corpus(corpus, out)
    print(f"wrote {len(corpus.clips)} clips and {len(corpus.captions)} captions to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    resume = None
    base = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        base = RunConfig(train_config_from_checkpoint(resume))
    cfg = _run_config(args, base)
    data = args.data or cfg.data
    if not data:
        raise UsageError("train needs --data (or data = ... in the config)")
    corpus = load_corpus(data)
    val_path = args.val_data or cfg.val_data
    validation = load_corpus(val_path) if val_path else None
    out = _prepare_out(args.out, args.force)
    cfg.extra["data"] = str(data)
    cfg.extra["val_data"] = str(val_path or "")
    (out / ECHO_FILE).write_text(cfg.to_text(), encoding="utf-8")

    log_fh = open(out / LOSS_LOG, "w", encoding="utf-8")

    def on_epoch(entry):
        log_fh.write(entry.line() + "\n")
        log_fh.flush()
        print(entry.line())

    try:
        result = train(corpus, cfg.train, resume=resume, validation=validation, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / CHECKPOINT_FILE)
        print(f"error: {exc}; last good checkpoint saved", file=sys.stderr)
        return EXIT_FAIL
    finally:
        log_fh.close()
    save_checkpoint(result.checkpoint, out / CHECKPOINT_FILE)
    if result.history:
        plots.loss_curve(result.history, out / "loss_curve.png")
    print(f"checkpoint: {out / CHECKPOINT_FILE} (epoch {result.checkpoint.epoch})")
    return EXIT_OK


def _eval_model(args) -> tuple[RetrievalModel, RunConfig]:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        cfg = RunConfig(train_config_from_checkpoint(ckpt))
        with tn.precision(cfg.train.precision):
            return model_from_checkpoint(ckpt), cfg
    cfg = _run_config(args)
    return None, cfg


def cmd_eval(args) -> int:
    if not args.ckpt and not args.random_init:
        raise UsageError("eval needs --ckpt or --random-init")
    corpus = load_corpus(args.data)
    model, cfg = _eval_model(args)
    if model is None:
        model, _ = initial_model(corpus, cfg.train)
    directions = DIRECTIONS if args.direction == "both" else (args.direction,)
    with tn.precision(cfg.train.precision):
        reports = evaluate(model, corpus, directions, mode=args.mode, split_gallery=args.split_gallery or None)
    for rep in reports.values():
        print(rep.summary())
    if args.out:
        out = _prepare_out(args.out, args.force)
        cfg.extra["data"] = str(args.data)
        cfg.extra["split_gallery"] = args.split_gallery or 0
        (out / ECHO_FILE).write_text(cfg.to_text(), encoding="utf-8")
        (out / "metrics.txt").write_text(metrics_text(reports), encoding="utf-8")
        plots.rank_histogram(reports, out / "rank_histogram.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        axes = parse_axes(args.axes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _run_config(args)
    data = args.data or cfg.data
    if not data:
        raise UsageError("ablate needs --data (or data = ... in the config)")
    corpus = load_corpus(data)
    eval_corpus = load_corpus(args.eval_data) if args.eval_data else None
    configs = ablation_configs(cfg.train, axes)
    rows = ablation_report(corpus, configs, trained=not args.untrained, eval_corpus=eval_corpus)
    table, records = format_table(rows), format_records(rows)
    sys.stdout.write(table + "\n" + records)
    if args.out:
        out = _prepare_out(args.out, args.force)
        cfg.extra["data"] = str(data)
        (out / ECHO_FILE).write_text(cfg.to_text(), encoding="utf-8")
        (out / "ablation.txt").write_text(table, encoding="utf-8")
        (out / "ablation_records.txt").write_text(records, encoding="utf-8")
        plots.ablation_bars(rows, out / "ablation.png")
    return EXIT_OK


def gradcheck_problem(cfg: RunConfig):
    """Tiny synthetic batch and model for the full-pipeline gradient check.

    Returns (loss function, named parameters). The embedding table covers the
    whole closed synthetic vocabulary of ``vocab_size`` words.
    """
    t = cfg.train
    if t.precision != "float64":
        raise tn.PrecisionError("gradient checks need precision = float64; refusing to run in 32-bit mode")
    dim = cfg.feature_dim
    corpus = synth_corpus(t.seed, t.batch_size, d2=dim, d3=dim, droi=dim, vocab_size=cfg.vocab_size)
    verbs, nouns = synthetic_lexicon(cfg.vocab_size)
    vocab = list(FUNCTION_WORDS) + verbs + nouns
    rng = np.random.default_rng(t.seed)
    with tn.precision("float64"):
        table = load_word_embeddings(None, t.word_dim, vocab, random_seed=t.seed)
        model = RetrievalModel.initialise(t.model_config(corpus), table, rng)
    clips, graphs = corpus.clips, corpus.captions

    def loss():
        return model.batch_loss(clips, graphs, t.margin)
    return loss, model.params


def run_gradcheck(cfg: RunConfig) -> GradCheckReport:
    loss, params = gradcheck_problem(cfg)
    with tn.precision("float64"):
        return finite_diff_check(loss, params, h=cfg.h, tol=cfg.tol)


def cmd_gradcheck(args) -> int:
    base = resolve(GRADCHECK_DEFAULTS)
    cfg = _run_config(args, base)
    start = time.perf_counter()
    report = run_gradcheck(cfg)
    for line in report.lines():
        print(line)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: {len(report.params)} parameter tensors, max relative error {report.max_rel_error:.3e} "
          f"(tol {report.tol:g}, h {report.h:g}) in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if report.passed else EXIT_FAIL


# -- argument parsing ------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--random-embeddings", type=int, metavar="SEED",
                   help="seed for the uniform word table used when no embeddings file is given")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rome", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d2", type=int, default=2048)
    p.add_argument("--d3", type=int, default=2048)
    p.add_argument("--droi", type=int)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--classes", type=int)
    p.add_argument("--captions-per-clip", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank a corpus and report R@k / MedR")
    _add_config_args(p)
    p.add_argument("--ckpt")
    p.add_argument("--random-init", action="store_true", help="score with a freshly initialised model")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=DIRECTIONS + ("both",), default="text_to_video")
    p.add_argument("--split-gallery", type=int, metavar="N", help="rank within consecutive galleries of N clips")
    p.add_argument("--mode", help="override the weighting mode")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ablation table over weighting / design / features")
    _add_config_args(p)
    p.add_argument("--axes", required=True, help="comma list of weighting, design, features")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--untrained", action="store_true", help="evaluate freshly initialised models")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    _add_config_args(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, tn.PrecisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (DataError, CheckpointError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, DataError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
