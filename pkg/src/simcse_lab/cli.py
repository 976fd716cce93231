"""``simcse-lab`` command line.

Exit codes: 0 success, 1 usage error, 2 bad data or configuration, 3 the run
itself failed (non-finite loss, undefined correlation). Errors go to stderr as
one line: ``simcse-lab: error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, parse_overrides
from .encoder import build_vocab, load_checkpoint
from .errors import InputError, NonFiniteError, SimcseLabError, UndefinedCorrelationError
from .experiments import (
    SweepSpec,
    average_over_seeds,
    batch_size_rank_grid,
    best_config_table,
    dataset_rank_table,
    load_rows,
    rank_table_rows,
    render_text,
    run_sweep,
    write_table_csv,
)
from .pipeline import corpus_sentences, load_training_data, run_metadata, run_training, test_set_name, write_run_outputs
from .sts import evaluate_sts, load_sts_tsv
from .trainer import FULL_N_EVALUATIONS, FULL_TOTAL_EXAMPLES

PROG = "simcse-lab"
OUTPUT_ENV = "SIMCSE_LAB_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
TABLES = ("best-config", "batch-size-rank", "dataset-rank", "seed-average")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, "simcse-lab-out")


def _run_config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "full_budget", False):
        overrides.setdefault("total_examples", str(FULL_TOTAL_EXAMPLES))
        overrides.setdefault("n_evaluations", str(FULL_N_EVALUATIONS))
    return RunConfig.load(args.config, overrides)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_build_vocab(args, out) -> int:
    cfg = _run_config(args)
    data = load_training_data(cfg.train_data, cfg.variant)
    vocab = build_vocab(corpus_sentences(data), cfg.encoder_config())
    dest = Path(args.out_dir)
    dest.mkdir(parents=True, exist_ok=True)
    vocab.save(dest / "vocab.txt")
    _write_json(dest / "metadata.json", run_metadata(cfg, command="build-vocab"))
    print(f"vocab\t{dest / 'vocab.txt'}\t{len(vocab)}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = _run_config(args)
    record, model = run_training(cfg)
    paths = write_run_outputs(args.out_dir, cfg, record, model)
    if record.failed:
        kind, _, msg = record.error.partition(": ")
        print(f"{PROG}: error[{kind}]: run failed after step {record.last_good_step}: {msg} (record in {paths['record']})", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"dev\t{record.best_dev:.2f}\tstep {record.best_step}", file=out)
    for name, score in sorted(record.test_scores.items()):
        print(f"{name}\t{score:.2f}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model = load_checkpoint(args.checkpoint)
    for path in args.sts:
        report = evaluate_sts(model, load_sts_tsv(path), strategy=args.pooling, name=test_set_name(path))
        print(report.render(), file=out)
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    spec = SweepSpec.load(args.spec)
    if args.full_budget:
        budget = {"total_examples": str(FULL_TOTAL_EXAMPLES), "n_evaluations": str(FULL_N_EVALUATIONS)}
        spec = dataclasses.replace(spec, overrides={**spec.overrides, **budget})

    def progress(key, status):
        print(f"{PROG}: run {key}: {status}", file=sys.stderr)

    outcome = run_sweep(spec, args.results, workers=args.workers, progress=progress)
    print(
        f"runs\t{len(outcome.rows)}\texecuted\t{len(outcome.executed)}\tskipped\t{len(outcome.skipped)}\tfailed\t{len(outcome.failed)}",
        file=out,
    )
    return EXIT_OK


def analysis_table(results, table: str, metric: str = "avg"):
    """(header, rows) for one analysis table, recomputed from the stored runs."""
    aggregates = average_over_seeds(load_rows(results))
    if not aggregates:
        raise InputError(f"no runs stored under {results}")
    if table == "best-config":
        return best_config_table(aggregates)
    if table == "batch-size-rank":
        grid = batch_size_rank_grid(aggregates, metric)
        return grid.header(), grid.rows()
    if table == "dataset-rank":
        return rank_table_rows(dataset_rank_table(aggregates, metric))
    names = sorted({n for a in aggregates for n in a.test_scores})
    header = ["dataset", "batch_size", "learning_rate", "seeds", "failed", "dev", *names, "avg"]
    rows = [
        [a.dataset, a.batch_size, a.learning_rate, a.n_ok, a.n_excluded, a.dev_score, *(a.test_scores.get(n) for n in names), a.avg]
        for a in aggregates
    ]
    return header, rows


def cmd_analyze(args, out) -> int:
    header, rows = analysis_table(args.results, args.table, args.metric)
    dest = Path(args.csv) if args.csv else Path(args.results) / "tables" / f"{args.table}.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_table_csv(header, rows, dest)
    out.write(render_text(header, rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="contrastive sentence-embedding laboratory")
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_args(sp):
        sp.add_argument("--config", required=True, help="run config file (key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out-dir", default=_default_out(), help=f"output directory (default ${OUTPUT_ENV} or ./simcse-lab-out)")

    sp = sub.add_parser("build-vocab", help="build the vocabulary of a training file")
    run_args(sp)
    sp.set_defaults(func=cmd_build_vocab)

    sp = sub.add_parser("train", help="train one model and evaluate its best checkpoint")
    run_args(sp)
    sp.add_argument("--full-budget", action="store_true", help="2^20 examples and 2^6 evaluations")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on STS files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sts", required=True, nargs="+", help="STS TSV file(s)")
    sp.add_argument("--pooling", choices=("cls", "mean"), default=None, help="default: the checkpoint's own")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="run a (dataset x batch size x LR x seed) grid")
    sp.add_argument("--spec", required=True, help="sweep file")
    sp.add_argument("--results", default=None, help="results directory (default: <out-dir>/sweep)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--full-budget", action="store_true", help="2^20 examples and 2^6 evaluations")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("analyze", help="seed-averaged and rank tables from a results directory")
    sp.add_argument("--results", required=True)
    sp.add_argument("--table", choices=TABLES, default="best-config")
    sp.add_argument("--metric", default="avg", help="avg, dev, or a test set name")
    sp.add_argument("--csv", default=None, help="where to write the CSV (default: <results>/tables/<table>.csv)")
    sp.set_defaults(func=cmd_analyze)
    return p


def _exit_code(exc: SimcseLabError) -> int:
    return EXIT_RUNTIME if isinstance(exc, (NonFiniteError, UndefinedCorrelationError)) else EXIT_DATA


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.command == "sweep" and args.results is None:
            args.results = str(Path(_default_out()) / "sweep")
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        return args.func(args, out)
    except UsageError as exc:
        print(f"{PROG}: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimcseLabError as exc:
        print(f"{PROG}: error[{exc.kind}]: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"{PROG}: error[io]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
