import io
import json

import pytest

from simcse_lab.cli import analysis_table, main
from simcse_lab.config import RunConfig, parse_kv_text
from simcse_lab.encoder import Vocabulary, load_checkpoint
from simcse_lab.experiments import render_text
from simcse_lab.pipeline import run_training
from simcse_lab.sts import evaluate_sts, load_sts_tsv
from simcse_lab.synthetic import write_suite
from simcse_lab.trainer import RunRecord

TINY = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "d_ff=16", "--set", "n_layers=1"]
SHORT = ["--set", "total_examples=128", "--set", "n_evaluations=2", "--set", "batch_size=16"]


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_suite(root, seed=9, n_train=200, n_dev=40, n_test=40)
    return root


def run(argv, capsys):
    out = io.StringIO()
    code = main(argv, out=out)
    return code, out.getvalue(), capsys.readouterr().err


def test_usage_errors(capsys):
    code, _, err = run([], capsys)
    assert code == 1 and err.startswith("simcse-lab: error[usage]:")
    assert run(["train"], capsys)[0] == 1
    assert run(["sweep", "--spec", "x", "--workers", "0"], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1


def test_config_errors_exit_2(suite, capsys, tmp_path):
    code, _, err = run(["train", "--config", str(suite / "run.cfg"), "--set", "colour=blue"], capsys)
    assert code == 2 and err.startswith("simcse-lab: error[config]:") and "colour" in err
    code, _, err = run(["train", "--config", str(tmp_path / "absent.cfg")], capsys)
    assert code == 2 and "error[config]" in err
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\tb\n")
    code, _, err = run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--sts", str(bad)], capsys)
    assert code == 2 and len(err.strip().splitlines()) == 1


def test_build_vocab(suite, capsys, tmp_path):
    code, out, _ = run(["build-vocab", "--config", str(suite / "run.cfg"), "--out-dir", str(tmp_path)], capsys)
    assert code == 0 and out.startswith("vocab\t")
    vocab = Vocabulary.load(tmp_path / "vocab.txt")
    assert vocab.tokens[:4] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]"] and len(vocab) <= 44
    assert json.loads((tmp_path / "metadata.json").read_text())["command"] == "build-vocab"


def test_train_happy_path_matches_library(suite, capsys, tmp_path):
    argv = ["train", "--config", str(suite / "run.cfg"), "--set", "seed=7", *TINY, *SHORT, "--out-dir", str(tmp_path)]
    code, out, _ = run(argv, capsys)
    assert code == 0
    record = RunRecord.from_json((tmp_path / "record.json").read_text())
    assert out.splitlines()[0] == f"dev\t{record.best_dev:.2f}\tstep {record.best_step}"
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["seed"] == 7 and meta["rng_algorithm"] and meta["code_version"] and meta["status"] == "ok"
    # the metadata alone reproduces the run
    cfg = RunConfig.from_mapping(parse_kv_text(meta["config_text"]))
    again, model = run_training(cfg)
    assert again.to_json() == record.to_json()
    assert (tmp_path / "resolved.cfg").read_text() == meta["config_text"]
    # eval is a thin adapter over evaluate_sts
    dev = suite / "dev.tsv"
    code, out, _ = run(["eval", "--checkpoint", str(tmp_path / "model.ckpt"), "--sts", str(dev), str(suite / "test.tsv")], capsys)
    assert code == 0
    loaded = load_checkpoint(tmp_path / "model.ckpt")
    assert out.splitlines()[0] == evaluate_sts(loaded, load_sts_tsv(dev), name="dev").render()
    assert out.splitlines()[0] == f"dev\t{record.best_dev:.2f}"
    assert out.splitlines()[1].startswith("test\t")


def test_output_dir_from_environment(suite, capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SIMCSE_LAB_OUTPUT_DIR", str(tmp_path / "env-out"))
    code, _, _ = run(["train", "--config", str(suite / "run.cfg"), *TINY, *SHORT], capsys)
    assert code == 0 and (tmp_path / "env-out" / "record.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_exits_3(suite, capsys, tmp_path):
    argv = ["train", "--config", str(suite / "run.cfg"), *TINY, *SHORT, "--set", "peak_lr=1e300", "--out-dir", str(tmp_path)]
    code, _, err = run(argv, capsys)
    assert code == 3
    assert err.startswith("simcse-lab: error[") and "run failed after step" in err
    record = RunRecord.from_json((tmp_path / "record.json").read_text())
    assert record.failed
    assert json.loads((tmp_path / "metadata.json").read_text())["status"] == "failed"


def test_sweep_and_analyze(suite, capsys, tmp_path):
    spec = suite / "sweep.cfg"
    spec.write_text(
        "base_config = run.cfg\ndatasets = syn\ndataset.syn = train_unsup.txt\n"
        "batch_sizes = 16, 32\nlearning_rates = 1e-4, 5e-4\nseeds = 0\n"
        "set.total_examples = 128\nset.n_evaluations = 2\nset.d_model = 16\nset.n_heads = 2\nset.d_ff = 16\nset.n_layers = 1\n"
    )
    results = tmp_path / "res"
    code, out, err = run(["sweep", "--spec", str(spec), "--results", str(results)], capsys)
    assert code == 0 and out.strip() == "runs\t4\texecuted\t4\tskipped\t0\tfailed\t0"
    assert err.count("simcse-lab: run ") == 4
    code, out, _ = run(["sweep", "--spec", str(spec), "--results", str(results), "--workers", "2"], capsys)
    assert out.strip() == "runs\t4\texecuted\t0\tskipped\t4\tfailed\t0"
    for table in ("best-config", "batch-size-rank", "dataset-rank", "seed-average"):
        if table == "dataset-rank":
            # one dataset: nothing to rank against
            assert run(["analyze", "--results", str(results), "--table", table], capsys)[0] == 2
            continue
        code, out, _ = run(["analyze", "--results", str(results), "--table", table], capsys)
        assert code == 0
        assert out == render_text(*analysis_table(results, table))
        assert (results / "tables" / f"{table}.csv").exists()
    code, out, _ = run(["analyze", "--results", str(results), "--table", "batch-size-rank"], capsys)
    assert out.splitlines()[0].split() == ["batch_size", "lr=0.0001", "lr=0.0005", "Avg"]
    assert run(["analyze", "--results", str(tmp_path / "empty")], capsys)[0] == 2
