"""Grid sweeps, seed averaging, the results store and rank tables.

A sweep file is a flat key-value file like a run config::

    base_config = run.cfg            # encoder/loss/eval settings for every run
    datasets = [wiki, nli]
    dataset.wiki = data/wiki.txt
    dataset.nli = data/nli.tsv
    batch_sizes = 64, 128, 256, 512
    learning_rates = desk            # or "full", or an explicit list
    seeds = 0, 1, 2, 3, 4
    variant = unsupervised
    set.total_examples = 4096        # optional overrides of base_config keys

Every finished grid point is stored as ``runs/<key>.json`` under the results
directory. That directory is the only source of truth: ``results.csv`` and all
analysis tables are recomputed from it and never patched in place.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .config import RunConfig, parse_list, read_kv_file
from .errors import ConfigError, InputError, ParseError, SimcseLabError
from .pipeline import run_metadata, run_training
from .sts import average_ranks
from .trainer import DESK_LEARNING_RATES, FULL_BATCH_SIZES, FULL_LEARNING_RATES, RunRecord

LR_PRESETS = {"desk": DESK_LEARNING_RATES, "full": FULL_LEARNING_RATES}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
FIXED_COLUMNS = ("dataset", "batch_size", "learning_rate", "seed", "dev_score")
TAIL_COLUMNS = ("avg", "status")
TEST_PREFIX = "test:"


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else "%.17g" % x


# --------------------------------------------------------------- sweep spec


@dataclass(frozen=True)
class GridPoint:
    dataset: str
    batch_size: int
    learning_rate: float
    seed: int

    @property
    def key(self) -> str:
        return f"{self.dataset}__bs{self.batch_size}__lr{self.learning_rate!r}__seed{self.seed}"


@dataclass(frozen=True)
class SweepSpec:
    base_config: str
    datasets: dict  # id -> training file, in declaration order
    batch_sizes: tuple = FULL_BATCH_SIZES
    learning_rates: tuple = DESK_LEARNING_RATES
    seeds: tuple = DEFAULT_SEEDS
    variant: str = "unsupervised"
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        raw = read_kv_file(path)
        base = Path(path).parent
        ids = parse_list(raw.pop("datasets", ""))
        if not ids:
            raise ConfigError(f"{path}: 'datasets' is empty")
        datasets = {}
        for key in [k for k in raw if k.startswith("dataset.")]:
            datasets[key[len("dataset.") :]] = str(base / raw.pop(key))
        missing = [d for d in ids if d not in datasets]
        if missing:
            raise ConfigError(f"{path}: no 'dataset.<id>' path for {', '.join(missing)}")
        overrides = {k[len("set.") :]: raw.pop(k) for k in [k for k in raw if k.startswith("set.")]}
        if "base_config" not in raw:
            raise ConfigError(f"{path}: 'base_config' is required")
        kwargs = {"base_config": str(base / raw.pop("base_config"))}
        try:
            if "batch_sizes" in raw:
                kwargs["batch_sizes"] = tuple(int(v) for v in parse_list(raw.pop("batch_sizes")))
            if "learning_rates" in raw:
                value = raw.pop("learning_rates")
                kwargs["learning_rates"] = LR_PRESETS.get(value) or tuple(float(v) for v in parse_list(value))
            if "seeds" in raw:
                kwargs["seeds"] = tuple(int(v) for v in parse_list(raw.pop("seeds")))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if "variant" in raw:
            kwargs["variant"] = raw.pop("variant")
        if raw:
            raise ConfigError(f"{path}: unknown sweep key(s): {', '.join(sorted(raw))}")
        return cls(datasets={d: datasets[d] for d in ids}, overrides=overrides, **kwargs)

    def grid(self) -> list[GridPoint]:
        return [
            GridPoint(d, bs, lr, seed)
            for d in self.datasets
            for bs in self.batch_sizes
            for lr in self.learning_rates
            for seed in self.seeds
        ]

    def run_config(self, point: GridPoint) -> RunConfig:
        base = RunConfig.load(self.base_config)
        values = dict(self.overrides)
        values.update(
            variant=self.variant,
            batch_size=str(point.batch_size),
            peak_lr=repr(point.learning_rate),
            seed=str(point.seed),
        )
        cfg = base.with_overrides(values)
        return dataclasses.replace(cfg, train_data=self.datasets[point.dataset])

    def resolve(self) -> dict[str, RunConfig]:
        """Check every grid point before anything runs."""
        for d, p in self.datasets.items():
            if not Path(p).is_file():
                raise ConfigError(f"dataset {d!r}: training file {p} not found")
        if not (self.batch_sizes and self.learning_rates and self.seeds):
            raise ConfigError("batch_sizes, learning_rates and seeds must be non-empty")
        return {pt.key: self.run_config(pt) for pt in self.grid()}


# --------------------------------------------------------------- result rows


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    batch_size: int
    learning_rate: float
    seed: int
    dev_score: Optional[float]
    test_scores: dict
    status: str = "ok"

    @property
    def avg(self) -> Optional[float]:
        if not self.test_scores:
            return None
        return sum(self.test_scores.values()) / len(self.test_scores)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def from_record(cls, point: GridPoint, record: RunRecord) -> "ResultRow":
        return cls(
            point.dataset,
            point.batch_size,
            point.learning_rate,
            point.seed,
            None if record.failed else record.best_dev,
            {} if record.failed else dict(sorted(record.test_scores.items())),
            record.status,
        )


def _default_runner(cfg: RunConfig) -> RunRecord:
    return run_training(cfg)[0]


def _execute(runner, cfg: RunConfig) -> str:
    try:
        record = runner(cfg)
    except SimcseLabError as exc:
        record = RunRecord(config=cfg.to_dict(), status="failed", error=f"{exc.kind}: {exc}")
    return record.to_json()


@dataclass
class SweepOutcome:
    rows: list
    executed: list  # keys run by this call
    skipped: list  # keys already present in the store

    @property
    def failed(self) -> list:
        return [r for r in self.rows if not r.ok]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_sweep(
    spec: SweepSpec,
    results_dir,
    workers: int = 1,
    runner: Callable[[RunConfig], RunRecord] | None = None,
    progress: Callable[[str, str], None] | None = None,
) -> SweepOutcome:
    """Run every grid point not already in ``results_dir``.

    The calling process is the only writer: workers return serialized records
    and the parent stores them. Returns all rows of this spec, old and new.
    """
    configs = spec.resolve()
    runner = runner or _default_runner
    runs = Path(results_dir) / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    points = {pt.key: pt for pt in spec.grid()}
    todo = [k for k in points if not (runs / f"{k}.json").exists()]
    skipped = [k for k in points if k not in todo]

    def store(key: str, record_json: str) -> None:
        doc = {
            "point": points[key].__dict__,
            "record": json.loads(record_json),
            "metadata": run_metadata(configs[key]),
        }
        _write_atomic(runs / f"{key}.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if progress:
            progress(key, doc["record"]["status"])

    if workers <= 1 or len(todo) <= 1:
        for key in todo:
            store(key, _execute(runner, configs[key]))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_execute, runner, configs[k]): k for k in todo}
            for fut in as_completed(futures):
                store(futures[fut], fut.result())

    rows = [r for r in load_rows(results_dir) if GridPoint(r.dataset, r.batch_size, r.learning_rate, r.seed).key in points]
    write_results_csv(load_rows(results_dir), Path(results_dir) / "results.csv")
    return SweepOutcome(rows, todo, skipped)


def load_rows(results_dir) -> list[ResultRow]:
    """Every stored run, in grid order."""
    rows = []
    for path in sorted((Path(results_dir) / "runs").glob("*.json")):
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            pt = GridPoint(**doc["point"])
            record = RunRecord.from_json(json.dumps(doc["record"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"unreadable run file: {exc}", path=path) from None
        rows.append(ResultRow.from_record(pt, record))
    rows.sort(key=lambda r: (r.dataset, r.batch_size, r.learning_rate, r.seed))
    return rows


# --------------------------------------------------------------- CSV store


def _test_names(rows) -> list[str]:
    return sorted({name for r in rows for name in r.test_scores})


def write_results_csv(rows, path) -> None:
    """Columns: dataset, batch_size, learning_rate, seed, dev_score, test:<name>..., avg, status."""
    names = _test_names(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*FIXED_COLUMNS, *(TEST_PREFIX + n for n in names), *TAIL_COLUMNS])
        for r in rows:
            w.writerow(
                [
                    r.dataset,
                    r.batch_size,
                    _fmt(r.learning_rate),
                    r.seed,
                    _fmt(r.dev_score),
                    *(_fmt(r.test_scores.get(n)) for n in names),
                    _fmt(r.avg),
                    r.status,
                ]
            )


def read_results_csv(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty results file", 1, path)
        fixed, middle, tail = header[: len(FIXED_COLUMNS)], header[len(FIXED_COLUMNS) : -2], header[-2:]
        if tuple(fixed) != FIXED_COLUMNS or tuple(tail) != TAIL_COLUMNS:
            raise ParseError(f"header must start with {','.join(FIXED_COLUMNS)} and end with avg,status", 1, path)
        foreign = [c for c in middle if not c.startswith(TEST_PREFIX) or c == TEST_PREFIX]
        if foreign:
            raise ParseError(f"unknown column(s): {', '.join(foreign)}", 1, path)
        names = [c[len(TEST_PREFIX) :] for c in middle]
        rows = []
        for lineno, cells in enumerate(reader, 2):
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(cells)}", lineno, path)
            try:
                tests = {n: float(v) for n, v in zip(names, cells[5:-2]) if v != ""}
                row = ResultRow(
                    cells[0],
                    int(cells[1]),
                    float(cells[2]),
                    int(cells[3]),
                    float(cells[4]) if cells[4] else None,
                    tests,
                    cells[-1],
                )
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
            rows.append(row)
    return rows


# --------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class AggregateRow:
    dataset: str
    batch_size: int
    learning_rate: float
    n_ok: int
    n_excluded: int
    dev_score: Optional[float]
    test_scores: dict
    avg: Optional[float]

    @property
    def missing(self) -> bool:
        return self.n_ok == 0


def average_over_seeds(rows) -> list[AggregateRow]:
    """Mean of every score column per (dataset, batch size, LR); failed seeds excluded and counted."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.dataset, r.batch_size, r.learning_rate), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        good = [r for r in members if r.ok]
        excluded = len(members) - len(good)
        if not good:
            out.append(AggregateRow(*key, 0, excluded, None, {}, None))
            continue
        names = _test_names(good)
        tests = {n: float(np.mean([r.test_scores[n] for r in good])) for n in names}
        avgs = [r.avg for r in good if r.avg is not None]
        out.append(
            AggregateRow(
                *key,
                len(good),
                excluded,
                float(np.mean([r.dev_score for r in good])),
                tests,
                float(np.mean(avgs)) if avgs else None,
            )
        )
    return out


def best_config_per_cell(aggregates, cell: str = "dataset") -> dict:
    """Per cell value: the (BS, LR) with the highest seed-mean dev score, or None if nothing finished.

    Ties go to the smallest batch size, then the smallest learning rate.
    """
    cells: dict = {}
    for a in aggregates:
        cells.setdefault(getattr(a, cell), []).append(a)
    out = {}
    for value, members in cells.items():
        best = None
        for a in sorted(members, key=lambda a: (a.batch_size, a.learning_rate)):
            if a.missing:
                continue
            if best is None or a.dev_score > best.dev_score:
                best = a
        out[value] = best
    return out


@dataclass(frozen=True)
class RankTable:
    labels: tuple
    average_ranks: dict
    conditions: tuple  # conditions that were ranked
    skipped: tuple  # conditions dropped for missing cells

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def _present(v) -> bool:
    return v is not None and not (isinstance(v, float) and math.isnan(v))


def rank_aggregate(scores: Mapping) -> RankTable:
    """``scores[competitor][condition]`` -> mean rank per competitor (1 = highest score).

    Ties share the mean of their positions. A condition with any missing cell is
    skipped for everyone.
    """
    labels = tuple(scores)
    if len(labels) < 2:
        raise InputError("ranking needs at least 2 competitors")
    conditions = []
    for c in (c for row in scores.values() for c in row):
        if c not in conditions:
            conditions.append(c)
    if not conditions:
        raise InputError("ranking needs at least 1 condition")
    kept, skipped = [], []
    for c in conditions:
        (kept if all(_present(scores[l].get(c)) for l in labels) else skipped).append(c)
    if not kept:
        raise InputError(f"every condition has a missing cell ({len(skipped)} skipped)")
    ranks = np.zeros((len(kept), len(labels)))
    for i, c in enumerate(kept):
        ranks[i] = average_ranks(-np.array([float(scores[l][c]) for l in labels]))
    mean = ranks.mean(axis=0)
    return RankTable(labels, {l: float(m) for l, m in zip(labels, mean)}, tuple(kept), tuple(skipped))


def _metric(a: AggregateRow, metric: str) -> Optional[float]:
    if a.missing:
        return None
    if metric == "avg":
        return a.avg
    if metric == "dev":
        return a.dev_score
    return a.test_scores.get(metric)


@dataclass(frozen=True)
class BatchSizeRankGrid:
    """Rows are batch sizes, columns learning rates, plus an overall Avg column."""

    batch_sizes: tuple
    learning_rates: tuple
    cells: dict  # (bs, lr) -> mean rank over conditions
    avg: dict  # bs -> mean rank over all (lr, condition) pairs
    skipped: int

    def header(self) -> list[str]:
        return ["batch_size", *(f"lr={lr:g}" for lr in self.learning_rates), "Avg"]

    def rows(self) -> list[list]:
        return [[bs, *(self.cells[bs, lr] for lr in self.learning_rates), self.avg[bs]] for bs in self.batch_sizes]


def batch_size_rank_grid(aggregates, metric: str = "avg") -> BatchSizeRankGrid:
    """Rank batch sizes within each (learning rate, dataset) condition."""
    bss = tuple(sorted({a.batch_size for a in aggregates}))
    lrs = tuple(sorted({a.learning_rate for a in aggregates}))
    by_lr = {lr: {bs: {} for bs in bss} for lr in lrs}
    overall = {bs: {} for bs in bss}
    for a in aggregates:
        v = _metric(a, metric)
        by_lr[a.learning_rate][a.batch_size][a.dataset] = v
        overall[a.batch_size][(a.learning_rate, a.dataset)] = v
    cells, skipped = {}, 0
    for lr in lrs:
        t = rank_aggregate(by_lr[lr])
        skipped += t.n_skipped
        for bs in bss:
            cells[bs, lr] = t.average_ranks[bs]
    return BatchSizeRankGrid(bss, lrs, cells, rank_aggregate(overall).average_ranks, skipped)


def dataset_rank_table(aggregates, metric: str = "avg") -> RankTable:
    """Rank training datasets within each (batch size, learning rate) configuration."""
    table: dict = {}
    for a in aggregates:
        table.setdefault(a.dataset, {})[(a.batch_size, a.learning_rate)] = _metric(a, metric)
    return rank_aggregate(table)


def best_config_table(aggregates) -> tuple[list[str], list[list]]:
    best = best_config_per_cell(aggregates)
    names = sorted({n for a in best.values() if a for n in a.test_scores})
    header = ["dataset", "batch_size", "learning_rate", "dev", *names, "avg", "seeds"]
    rows = []
    for dataset in sorted(best):
        a = best[dataset]
        if a is None:
            rows.append([dataset, *["missing"] * (len(header) - 1)])
            continue
        rows.append(
            [dataset, a.batch_size, a.learning_rate, a.dev_score, *(a.test_scores.get(n) for n in names), a.avg, a.n_ok]
        )
    return header, rows


def rank_table_rows(table: RankTable) -> tuple[list[str], list[list]]:
    return ["label", "avg_rank"], [[l, table.average_ranks[l]] for l in table.labels]


# --------------------------------------------------------------- rendering


def _cell(v, digits: int) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        # learning rates would round to zero at fixed precision
        return f"{v:g}" if 0 < abs(v) < 0.01 else f"{v:.{digits}f}"
    return str(v)


def render_text(header, rows, digits: int = 2) -> str:
    """Aligned plain text: first column left-justified, the rest right-justified."""
    grid = [list(map(str, header))] + [[_cell(v, digits) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in grid) for i in range(len(header))]
    lines = []
    for r in grid:
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines) + "\n"


def write_table_csv(header, rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else ("" if v is None else v) for v in r])
