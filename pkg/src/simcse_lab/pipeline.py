"""From a ``RunConfig`` to a trained model, its record and its metadata."""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import RunConfig
from .encoder import EncoderModel, build_vocab, save_checkpoint
from .errors import ConfigError, InputError, ParseError
from .losses import TrainExample
from .rng import RNG_ALGORITHM
from .sts import load_sts_tsv
from .trainer import RunRecord, train


def load_training_data(path, variant: str) -> list:
    """Sentences (one per line) or ``anchor<TAB>positive[<TAB>hard_negative]`` rows."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read training data {path}: {exc.strerror}") from None
    out = []
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if variant == "unsupervised":
                out.append(line)
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ParseError(f"expected 2 or 3 tab-separated columns, got {len(cols)}", lineno, path)
            out.append(TrainExample(*cols))
    if not out:
        raise InputError(f"{path}: no training examples")
    return out


def corpus_sentences(dataset) -> list[str]:
    out = []
    for ex in dataset:
        if isinstance(ex, TrainExample):
            out.extend(s for s in (ex.anchor, ex.positive, ex.hard_negative) if s is not None)
        else:
            out.append(ex)
    return out


def test_set_name(path) -> str:
    return Path(path).stem


def load_eval_sets(cfg: RunConfig):
    if not cfg.dev_sts:
        raise ConfigError("dev_sts is not set")
    dev = load_sts_tsv(cfg.dev_sts)
    tests = {}
    for path in cfg.test_sts:
        name = test_set_name(path)
        if name in tests:
            raise ConfigError(f"two test files share the name {name!r}")
        tests[name] = load_sts_tsv(path)
    return dev, tests


def run_metadata(cfg: RunConfig, **extra) -> dict:
    """Everything needed to reproduce a run from scratch."""
    meta = {
        "config": cfg.to_dict(),
        "config_text": cfg.to_text(),
        "seed": cfg.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "kernel_backend": kernels.BACKEND,
        "code_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    meta.update(extra)
    return meta


def run_training(cfg: RunConfig, dataset=None, loss_hook=None):
    """Build vocabulary, initialise, train. Returns ``(record, model)``."""
    if dataset is None:
        if not cfg.train_data:
            raise ConfigError("train_data is not set")
        dataset = load_training_data(cfg.train_data, cfg.variant)
    dev, tests = load_eval_sets(cfg)
    enc_cfg = cfg.encoder_config()
    vocab = build_vocab(corpus_sentences(dataset), enc_cfg)
    model = EncoderModel.initialize(enc_cfg, vocab, cfg.seed)
    record, _ = train(
        model,
        dataset,
        cfg.loss_config(),
        cfg.train_config(),
        dev,
        tests,
        config_snapshot=cfg.to_dict(),
        loss_hook=loss_hook,
    )
    return record, model


def write_run_outputs(out_dir, cfg: RunConfig, record: RunRecord, model: EncoderModel) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "record": out / "record.json",
        "checkpoint": out / "model.ckpt",
        "metadata": out / "metadata.json",
        "config": out / "resolved.cfg",
    }
    paths["record"].write_text(record.to_json() + "\n", encoding="utf-8")
    save_checkpoint(model, paths["checkpoint"])
    paths["config"].write_text(cfg.to_text(), encoding="utf-8")
    meta = run_metadata(cfg, wall_time_seconds=record.wall_time, status=record.status)
    paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
