"""Command line: ``vtlab gen-data | train | eval | ablate | gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import diffmath as dm
from .binio import FormatError
from .corpus import CorpusConfig, CorpusConfigError, generate_corpus, metadata, read_corpus, write_corpus
from .encoders import CheckpointMismatchError, checkpoint_read
from .experiment import (
    SUITES,
    ablation_csv,
    eval_report_csv,
    eval_report_json,
    evaluate,
    held_out_split,
    run_suite,
)
from .gradcheck import LOSS_NAMES, format_rows, run_gradcheck
from .probes import ProbeError
from .trainer import ConfigError, NumericalError, TrainConfig, load_config, resume, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vtlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def cmd_gen_data(args) -> int:
    cfg = CorpusConfig(
        num_actions=args.actions, num_function_words=args.function_words, clips_per_video=args.clips,
        max_words_per_video=args.max_words, raw_dim=args.raw_dim, noise_sigma=args.noise,
        num_videos=args.videos, content_word_rate=args.content_rate, seed=args.seed,
        phrase_len=args.phrase_len, modality_coupling=args.coupling,
    )
    try:
        cfg.validate()
    except CorpusConfigError as exc:
        raise UsageError(str(exc)) from exc
    corpus = generate_corpus(cfg)
    write_corpus(corpus, args.out)
    print(json.dumps(metadata(corpus), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    corpus = read_corpus(args.data)
    train_c, _ = held_out_split(corpus, cfg)
    if args.resume:
        _, report = resume(args.resume, cfg, train_c, args.out, args.stop_after)
    else:
        _, report = train(cfg, train_c, args.out, stop_after_epoch=args.stop_after)
    final = report.rows[-1] if report.rows else {}
    print(json.dumps({"epochs_completed": len(report.rows), "final": final,
                      "checkpoint": os.path.join(args.out, "checkpoint.lvck")}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = read_corpus(args.data)
    ck = checkpoint_read(args.ckpt)
    cfg = TrainConfig(**{**ck.manifest["config"], "lr_milestones": tuple(ck.manifest["config"]["lr_milestones"])})
    if ck.params.raw_dim != corpus.config.raw_dim:
        raise CheckpointMismatchError(
            f"checkpoint expects raw_dim {ck.params.raw_dim}, corpus has {corpus.config.raw_dim}")
    _, test_c = held_out_split(corpus, cfg)
    metrics = evaluate(ck.params, cfg, test_c.videos, args.seed, with_similarity_stats=True)
    os.makedirs(args.report, exist_ok=True)
    extra = {"similarity": metrics["_similarity"].summary(), "eval_seed": args.seed,
             "order_confusion": metrics["_order"].confusion.tolist(),
             "distance_confusion": metrics["_distance"].confusion.tolist(),
             "held_out_videos": len(test_c), "checkpoint_step": ck.step}
    with open(os.path.join(args.report, "eval_report.json"), "w") as fh:
        fh.write(eval_report_json(metrics, extra))
    with open(os.path.join(args.report, "eval_report.csv"), "w") as fh:
        fh.write(eval_report_csv(metrics))
    with open(os.path.join(args.report, "similarity_hist.csv"), "w") as fh:
        fh.write(metrics["_similarity"].histogram_csv())
    print(eval_report_json(metrics), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args.base_config)
    corpus = read_corpus(args.data) if args.data else generate_corpus(CorpusConfig())
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    rows: list = []

    def progress(row, seconds):
        rows.append(row)
        # rewrite after every point so an interrupted sweep still leaves a table
        with open(args.out, "w") as fh:
            fh.write(ablation_csv(rows))
        print(f"{row['suite']}[{row['index']}] {row['label']}: {row['status']} ({seconds:.1f}s)", file=sys.stderr)

    run_suite(args.suite, base, corpus, args.eval_seed, on_row=progress)
    if not rows:
        with open(args.out, "w") as fh:
            fh.write(ablation_csv(rows))
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"suite": args.suite, "points": len(rows), "failed": failed, "table": args.out}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.seed, inject_fault=args.inject_fault)
    sys.stdout.write(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vtlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus file")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=512)
    g.add_argument("--actions", type=int, default=32)
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--function-words", type=int, default=4)
    g.add_argument("--max-words", type=int, default=32)
    g.add_argument("--raw-dim", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--content-rate", type=float, default=0.9)
    g.add_argument("--phrase-len", type=int, default=1)
    g.add_argument("--coupling", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on the training split of a corpus")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop after this many epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run every probe on the held-out split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one ablation grid")
    a.add_argument("--suite", required=True, choices=list(SUITES))
    a.add_argument("--base-config")
    a.add_argument("--out", required=True, help="CSV table path")
    a.add_argument("--data", help="corpus file (default: freshly generated desk corpus)")
    a.add_argument("--eval-seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", choices=list(LOSS_NAMES), help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help return their code instead of exiting
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vtlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, dm.GradientError) as exc:
        print(f"vtlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigError, CheckpointMismatchError, ProbeError, OSError, ValueError) as exc:
        print(f"vtlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
