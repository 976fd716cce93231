import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simcse_lab.errors import ConfigError, InputError, ParseError
from simcse_lab.experiments import (
    AggregateRow,
    ResultRow,
    SweepSpec,
    average_over_seeds,
    batch_size_rank_grid,
    best_config_per_cell,
    best_config_table,
    dataset_rank_table,
    load_rows,
    rank_aggregate,
    read_results_csv,
    render_text,
    run_sweep,
    write_results_csv,
)
from simcse_lab.pipeline import run_training
from simcse_lab.synthetic import write_suite
from simcse_lab.trainer import DESK_LEARNING_RATES, FULL_LEARNING_RATES, RunRecord

# --------------------------------------------------------------- oracles


def oracle_rank(values):
    # rank 1 = highest; ties take the mean position
    return [1 + sum(v > x for v in values) + (sum(v == x for v in values) - 1) / 2 for x in values]


def oracle_average(table):
    labels = list(table)
    conds = sorted({c for row in table.values() for c in row})
    totals = dict.fromkeys(labels, 0.0)
    for c in conds:
        for label, r in zip(labels, oracle_rank([table[l][c] for l in labels])):
            totals[label] += r
    return {l: totals[l] / len(conds) for l in labels}


# --------------------------------------------------------------- rank_aggregate


def test_rank_aggregate_hand_example():
    t = rank_aggregate({"A": {1: 90, 2: 90, 3: 80}, "B": {1: 85, 2: 95, 3: 85}})
    assert t.average_ranks["A"] == pytest.approx(5 / 3)
    assert t.average_ranks["B"] == pytest.approx(4 / 3)


def test_rank_aggregate_ties_share_mean_rank():
    t = rank_aggregate({"A": {"c": 1.0}, "B": {"c": 1.0}, "C": {"c": 0.0}})
    assert t.average_ranks == {"A": 1.5, "B": 1.5, "C": 3.0}


def test_rank_aggregate_matches_oracle_20x10():
    rs = np.random.default_rng(0)
    table = {f"m{i}": {c: float(rs.integers(0, 6)) for c in range(10)} for i in range(20)}
    got = rank_aggregate(table).average_ranks
    want = oracle_average(table)
    assert got == pytest.approx(want, abs=1e-12)


def test_rank_aggregate_skips_incomplete_conditions():
    t = rank_aggregate({"A": {1: 1.0, 2: None, 3: 2.0}, "B": {1: 2.0, 2: 5.0, 3: float("nan")}})
    assert t.skipped == (2, 3) and t.n_skipped == 2
    assert t.average_ranks == {"A": 2.0, "B": 1.0}


def test_rank_aggregate_errors():
    with pytest.raises(InputError):
        rank_aggregate({"A": {1: 1.0}})
    with pytest.raises(InputError):
        rank_aggregate({"A": {}, "B": {}})
    with pytest.raises(InputError):
        rank_aggregate({"A": {1: None}, "B": {1: 1.0}})


score_tables = st.integers(2, 6).flatmap(
    lambda k: st.lists(st.lists(st.integers(0, 4), min_size=k, max_size=k), min_size=1, max_size=6)
)


@settings(max_examples=150)
@given(score_tables)
def test_rank_sums_and_monotone_invariance(conditions):
    k = len(conditions[0])
    table = {f"x{i}": {c: float(row[i]) for c, row in enumerate(conditions)} for i in range(k)}
    ranks = rank_aggregate(table).average_ranks
    assert abs(sum(ranks.values()) - k * (k + 1) / 2) < 1e-9
    assert all(1 <= r <= k for r in ranks.values())
    warped = {l: {c: math.exp(v) * 3 - 1 for c, v in row.items()} for l, row in table.items()}
    assert rank_aggregate(warped).average_ranks == ranks


# --------------------------------------------------------------- averaging and selection


def _row(dataset="d", bs=64, lr=1e-4, seed=0, dev=80.0, tests=None, status="ok"):
    tests = {"a": dev - 1, "b": dev - 3} if tests is None else tests
    return ResultRow(dataset, bs, lr, seed, dev if status == "ok" else None, tests if status == "ok" else {}, status)


def test_average_over_seeds_examples():
    agg = average_over_seeds([_row(dev=80, seed=0), _row(dev=82, seed=1)])
    assert agg[0].dev_score == 81.0 and agg[0].n_ok == 2 and agg[0].n_excluded == 0
    rows = [_row(dev=70 + s, seed=s) for s in range(4)] + [_row(seed=4, status="failed")]
    agg = average_over_seeds(rows)[0]
    assert agg.n_ok == 4 and agg.n_excluded == 1 and agg.dev_score == 71.5
    missing = average_over_seeds([_row(status="failed"), _row(seed=1, status="failed")])[0]
    assert missing.missing and missing.dev_score is None and missing.n_excluded == 2


def test_average_over_seeds_matches_recompute():
    rs = np.random.default_rng(1)
    rows = []
    for d, bs, lr, seed in itertools.product("xy", (64, 128), (1e-4, 3e-4), range(5)):
        status = "failed" if rs.uniform() < 0.2 else "ok"
        rows.append(_row(d, bs, lr, seed, float(rs.normal(70, 5)), None, status))
    for agg in average_over_seeds(rows):
        group = [r for r in rows if (r.dataset, r.batch_size, r.learning_rate) == (agg.dataset, agg.batch_size, agg.learning_rate)]
        good = [r for r in group if r.status == "ok"]
        assert agg.n_ok == len(good) and agg.n_excluded == len(group) - len(good)
        if good:
            assert abs(agg.dev_score - sum(r.dev_score for r in good) / len(good)) < 1e-12
            assert abs(agg.avg - sum((r.test_scores["a"] + r.test_scores["b"]) / 2 for r in good) / len(good)) < 1e-12


def _agg(dataset, bs, lr, dev, avg=None):
    return AggregateRow(dataset, bs, lr, 1, 0, dev, {"t": avg if avg is not None else dev}, avg if avg is not None else dev)


def test_best_config_examples():
    best = best_config_per_cell([_agg("d", 64, 1e-4, 79, 60), _agg("d", 128, 1e-4, 81, 50)])
    assert best["d"].batch_size == 128 and best["d"].avg == 50
    tie = best_config_per_cell([_agg("d", 128, 1e-4, 80), _agg("d", 64, 5e-4, 80), _agg("d", 64, 3e-4, 80)])
    assert (tie["d"].batch_size, tie["d"].learning_rate) == (64, 3e-4)
    gone = AggregateRow("e", 64, 1e-4, 0, 5, None, {}, None)
    assert best_config_per_cell([gone])["e"] is None


def test_best_config_matches_exhaustive_scan():
    rs = np.random.default_rng(2)
    for _ in range(100):
        aggs = [
            _agg(d, bs, lr, float(rs.integers(0, 4)))
            for d in "pq"
            for bs in (64, 128, 256, 512)
            for lr in (1e-5, 3e-5, 5e-5)
        ]
        rs.shuffle(aggs)
        got = best_config_per_cell(aggs)
        for d in "pq":
            cands = [a for a in aggs if a.dataset == d]
            top = max(a.dev_score for a in cands)
            want = min((a.batch_size, a.learning_rate) for a in cands if a.dev_score == top)
            assert (got[d].batch_size, got[d].learning_rate) == want


def test_batch_size_grid_shape_and_column_sums():
    rs = np.random.default_rng(3)
    aggs = [
        _agg(d, bs, lr, 0.0, float(rs.normal()))
        for d in ("a", "b", "c")
        for bs in (64, 128, 256, 512)
        for lr in FULL_LEARNING_RATES
    ]
    grid = batch_size_rank_grid(aggs)
    assert grid.header() == ["batch_size", "lr=1e-05", "lr=3e-05", "lr=5e-05", "Avg"]
    rows = grid.rows()
    assert [r[0] for r in rows] == [64, 128, 256, 512]
    for col in range(1, 5):
        assert abs(sum(r[col] for r in rows) - 10) < 1e-12
    # Avg is the mean rank over every (lr, dataset) condition
    for r in rows:
        assert abs(r[4] - sum(r[1:4]) / 3) < 1e-12


def test_dataset_rank_table():
    aggs = [_agg("good", 64, 1e-4, 0, 90), _agg("bad", 64, 1e-4, 0, 10), _agg("good", 128, 1e-4, 0, 5), _agg("bad", 128, 1e-4, 0, 6)]
    t = dataset_rank_table(aggs)
    assert t.average_ranks == {"bad": 1.5, "good": 1.5}


def test_best_config_table_and_render():
    header, rows = best_config_table([_agg("d", 64, 1e-4, 79.123, 60.5), _agg("e", 64, 1e-4, 70.0, 61.0)])
    assert header == ["dataset", "batch_size", "learning_rate", "dev", "t", "avg", "seeds"]
    text = render_text(header, rows)
    lines = text.splitlines()
    assert len(lines) == 3 and "79.12" in lines[1]
    assert len({len(l) for l in lines}) == 1  # aligned


# --------------------------------------------------------------- CSV store


def test_results_csv_round_trip(tmp_path):
    rows = [
        _row("d", 64, 1e-4, 0, 1 / 3, {"x": 2 / 3, "y": math.pi}),
        _row("d", 64, 1e-4, 1, status="failed"),
        _row("e", 128, 3e-4, 0, 80.1, {"x": 0.1}),
    ]
    path = tmp_path / "r.csv"
    write_results_csv(rows, path)
    assert read_results_csv(path) == rows
    text = path.read_text()
    assert text.splitlines()[0] == "dataset,batch_size,learning_rate,seed,dev_score,test:x,test:y,avg,status"
    assert "0.33333333333333331" in text  # 17 significant digits


@pytest.mark.parametrize(
    "text,match",
    [
        ("dataset,batch_size,learning_rate,seed,dev_score,bogus,avg,status\n", "bogus"),
        ("dataset,batch_size,learning_rate,seed,dev_score,avg,status\nd,64,1e-4,0,80,80,ok\nd,zz,1e-4,0,80,80,ok\n", "line 3"),
        ("dataset,batch_size,learning_rate,seed,dev_score,avg,status\nd,64\n", "line 2"),
    ],
)
def test_results_csv_rejects_malformed(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError, match=match):
        read_results_csv(path)


# --------------------------------------------------------------- sweeps


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    paths = write_suite(root, seed=5, n_train=256, n_dev=40, n_test=40)
    other = root / "other.txt"
    other.write_text("\n".join(paths["unsup"].read_text().splitlines()[::-1]) + "\n")
    return root


def _spec_text(**extra):
    lines = {
        "base_config": "run.cfg",
        "datasets": "[syn, other]",
        "dataset.syn": "train_unsup.txt",
        "dataset.other": "other.txt",
        "batch_sizes": "16, 32",
        "learning_rates": "1e-4, 5e-4",
        "seeds": "0, 1",
        "set.total_examples": "128",
        "set.n_evaluations": "2",
        "set.d_model": "16",
        "set.n_heads": "2",
        "set.d_ff": "16",
        "set.n_layers": "1",
    }
    lines.update(extra)
    return "".join(f"{k} = {v}\n" for k, v in lines.items() if v is not None)


def _spec(suite, name="sweep.cfg", **extra):
    path = suite / name
    path.write_text(_spec_text(**extra))
    return SweepSpec.load(path)


def test_sweep_spec_load(suite):
    spec = _spec(suite, learning_rates="desk", seeds=None)
    assert spec.learning_rates == DESK_LEARNING_RATES and len(spec.seeds) == 5
    assert list(spec.datasets) == ["syn", "other"]
    assert len(spec.grid()) == 2 * 2 * 3 * 5
    assert spec.run_config(spec.grid()[0]).d_model == 16
    assert _spec(suite, learning_rates="full").learning_rates == FULL_LEARNING_RATES


@pytest.mark.parametrize(
    "extra",
    [{"dataset.other": None}, {"colour": "blue"}, {"batch_sizes": "16, x"}, {"set.no_such_key": "1"}],
)
def test_sweep_spec_errors(suite, extra):
    with pytest.raises(ConfigError):
        _spec(suite, "bad.cfg", **extra).resolve()


def fake_runner(cfg):
    if "other" in cfg.train_data and cfg.seed == 1 and cfg.batch_size == 32:
        return RunRecord(config={}, status="failed", error="non-finite: injected")
    base = 50 + cfg.batch_size / 8 + cfg.peak_lr * 1e4 + cfg.seed
    return RunRecord(config={}, evaluations=[(1, base)], best_dev=base, best_step=1, test_scores={"test": base - 2})


def test_unresolvable_dataset_fails_before_any_run(suite, tmp_path):
    spec = _spec(suite, "missing.cfg", **{"dataset.other": "nope.txt"})
    calls = []
    with pytest.raises(ConfigError, match="other"):
        run_sweep(spec, tmp_path, runner=lambda cfg: calls.append(cfg))
    assert calls == [] and not (tmp_path / "runs").exists()


def test_sweep_with_fake_runner_parallel_matches_serial(suite, tmp_path):
    spec = _spec(suite)
    serial = run_sweep(spec, tmp_path / "a", runner=fake_runner)
    parallel = run_sweep(spec, tmp_path / "b", workers=2, runner=fake_runner)
    assert len(serial.rows) == 16 and len(serial.failed) == 2
    assert serial.rows == parallel.rows
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    agg = average_over_seeds(serial.rows)
    assert len(agg) == 8 and sum(a.n_excluded for a in agg) == 2


def nan_at_one_point(cfg):
    def poison(step, loss):
        return loss * float("nan") if step == 2 else loss

    hook = poison if (cfg.batch_size, cfg.peak_lr, cfg.seed) == (32, 5e-4, 1) else None
    return run_training(cfg, loss_hook=hook)[0]


def test_real_sweep_idempotent_with_fault(suite, tmp_path):
    spec = _spec(suite, datasets="[syn]")
    first = run_sweep(spec, tmp_path, runner=nan_at_one_point)
    assert len(first.rows) == 8 and len(first.executed) == 8
    failed = [r for r in first.rows if not r.ok]
    assert len(failed) == 1 and (failed[0].batch_size, failed[0].seed) == (32, 1)
    assert all(r.dev_score is not None and "test" in r.test_scores for r in first.rows if r.ok)
    again = run_sweep(spec, tmp_path, runner=nan_at_one_point)
    assert again.executed == [] and len(again.skipped) == 8
    assert again.rows == first.rows == load_rows(tmp_path)
    assert read_results_csv(tmp_path / "results.csv") == first.rows


def test_real_sweep_deterministic(suite, tmp_path):
    spec = _spec(suite, datasets="[other]", batch_sizes="16", seeds="3")
    run_sweep(spec, tmp_path / "a")
    run_sweep(spec, tmp_path / "b")
    for name in ("results.csv", "runs/other__bs16__lr0.0001__seed3.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
