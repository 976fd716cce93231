"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, list values are comma separated
and may be wrapped in brackets::

    train_data = data/train.txt
    test_sts = [data/test_a.tsv, data/test_b.tsv]
    batch_size = 64

Relative paths are resolved against the directory holding the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError, ParseError
from .losses import LossConfig
from .trainer import TrainConfig

PATH_KEYS = ("train_data", "dev_sts", "test_sts")


def parse_kv_text(text: str, path=None) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", lineno, path)
        out[key] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_kv_text(text, path)


def parse_list(value: str) -> list[str]:
    value = value.strip()
    if value.startswith("[") and value.endswith("]"):
        value = value[1:-1]
    return [item.strip() for item in value.split(",") if item.strip()]


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind == tuple[str, ...]:
            return tuple(parse_list(value))
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(kind, '__name__', kind)}") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs; the keys of a run config file."""

    train_data: str = ""
    dev_sts: str = ""
    test_sts: tuple[str, ...] = ()
    # loss
    variant: str = "unsupervised"
    temperature: float = 0.05
    # encoder
    tokenization: str = "character"
    max_vocab: int = 8000
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    dropout_rate: float = 0.1
    max_seq_len: int = 64
    pooling: str = "cls"
    eval_pooler: bool = True
    init_std: float = 0.02
    # trainer
    batch_size: int = 64
    peak_lr: float = 3e-4
    total_examples: int = 2**16
    n_evaluations: int = 2**4
    warmup_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], base_dir=None) -> "RunConfig":
        hints = typing.get_type_hints(cls)
        unknown = sorted(set(mapping) - set(hints))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {k: _coerce(k, v, hints[k]) for k, v in mapping.items()}
        if base_dir is not None:
            base = Path(base_dir)
            for k in PATH_KEYS:
                if k not in kwargs:
                    continue
                if isinstance(kwargs[k], tuple):
                    kwargs[k] = tuple(str(base / p) for p in kwargs[k])
                elif kwargs[k]:
                    kwargs[k] = str(base / kwargs[k])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        """Read ``path`` then apply ``overrides`` (paths in overrides stay cwd-relative)."""
        mapping = read_kv_file(path) if path else {}
        cfg = cls.from_mapping(mapping, Path(path).parent if path else None)
        if overrides:
            cfg = cfg.with_overrides(overrides)
        return cfg

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        hints = typing.get_type_hints(type(self))
        unknown = sorted(set(overrides) - set(hints))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = dataclasses.replace(self, **{k: _coerce(k, v, hints[k]) for k, v in overrides.items()})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # each constructor raises its own parameter/config error
        try:
            self.encoder_config()
            self.loss_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            tokenization=self.tokenization,
            max_vocab=self.max_vocab,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout_rate=self.dropout_rate,
            max_seq_len=self.max_seq_len,
            pooling=self.pooling,
            eval_pooler=self.eval_pooler,
            init_std=self.init_std,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(temperature=self.temperature, variant=self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            total_examples=self.total_examples,
            n_evaluations=self.n_evaluations,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["test_sts"] = list(self.test_sts)
        return d

    def to_text(self) -> str:
        """Canonical file form; ``RunConfig.from_mapping(parse_kv_text(...))`` inverts it."""
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if isinstance(value, tuple):
                value = "[" + ", ".join(value) + "]"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
