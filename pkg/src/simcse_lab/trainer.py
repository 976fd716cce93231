"""AdamW, the warmup/decay schedule, and the fixed-budget training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, NonFiniteError, ParameterError, UndefinedCorrelationError
from .losses import LossConfig, TrainExample, batch_loss
from .rng import STREAM_DATA, STREAM_DROPOUT, RngState
from .sts import StsPair, evaluate_sts
from .tensor import backward

log = logging.getLogger(__name__)

FULL_BATCH_SIZES = (64, 128, 256, 512)
FULL_LEARNING_RATES = (1e-5, 3e-5, 5e-5)
# randomly initialised desk-scale encoders need roughly 10x the fine-tuning rates
DESK_LEARNING_RATES = (1e-4, 3e-4, 5e-4)
FULL_TOTAL_EXAMPLES = 2**20
FULL_N_EVALUATIONS = 2**6
DESK_TOTAL_EXAMPLES = 2**16
DESK_N_EVALUATIONS = 2**4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    peak_lr: float = 3e-4
    total_examples: int = DESK_TOTAL_EXAMPLES
    n_evaluations: int = DESK_N_EVALUATIONS
    warmup_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.total_examples < 1 or self.n_evaluations < 1:
            raise ConfigError("batch_size, total_examples and n_evaluations must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        eval_interval(self.total_examples, self.batch_size, self.n_evaluations)

    @property
    def total_steps(self) -> int:
        return self.total_examples // self.batch_size


def eval_interval(total_examples: int, batch_size: int, n_evaluations: int) -> int:
    """Steps between dev evaluations, e.g. 2**20 / 2**8 / 2**6 = 64."""
    if total_examples % batch_size:
        raise ConfigError(f"total_examples={total_examples} is not divisible by batch_size={batch_size}")
    steps = total_examples // batch_size
    if steps % n_evaluations:
        raise ConfigError(f"{steps} steps cannot be split into {n_evaluations} equal evaluation intervals")
    return steps // n_evaluations


def lr_at_step(t: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup to ``peak`` over the first ``warmup_fraction`` of steps, then linear decay to 0."""
    if total_steps <= 0:
        raise ParameterError(f"total_steps must be positive, got {total_steps}")
    if not 1 <= t <= total_steps:
        raise ParameterError(f"step {t} outside 1..{total_steps}")
    warmup = min(total_steps, max(1, round(warmup_fraction * total_steps)))
    if t <= warmup:
        return peak * t / warmup
    return peak * (total_steps - t) / (total_steps - warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        items = params.items() if hasattr(params, "items") else params
        m, v = {}, {}
        for name, p in items:
            m[name] = np.zeros_like(p.values)
            v[name] = np.zeros_like(p.values)
        return cls(m, v, 0)


def adamw_step(params, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    """One AdamW update in place; weight decay is applied apart from the adaptive step."""
    items = list(params.items() if hasattr(params, "items") else params)
    for name, p in items:
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NonFiniteError(f"non-finite gradient in parameter {name} ({bad} of {p.grad.size} entries)")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in items:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            p.values -= lr * weight_decay * p.values
        p.values -= lr * update


def sample_training_stream(dataset: Sequence, total_examples: int, seed: int) -> list:
    """Exactly ``total_examples`` items: shuffled full passes, the last one truncated."""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot sample from an empty training set")
    rng = RngState(seed, STREAM_DATA)
    order = []
    remaining = total_examples
    while remaining > 0:
        perm = rng.permutation(n)[:remaining]
        order.append(perm)
        remaining -= perm.size
    idx = np.concatenate(order) if order else np.empty(0, dtype=np.int64)
    return [dataset[i] for i in idx]


@dataclass
class RunRecord:
    config: dict
    evaluations: list = field(default_factory=list)  # [step, dev score x100]
    best_dev: Optional[float] = None
    best_step: Optional[int] = None
    test_scores: dict = field(default_factory=dict)
    status: str = "ok"
    last_good_step: int = 0
    error: Optional[str] = None
    # kept out of to_json() so records are bit-reproducible
    wall_time: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        d["evaluations"] = [tuple(e) for e in d["evaluations"]]
        return cls(**d)

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def select_best(evaluations) -> int:
    """Index of the highest score; ties go to the earliest evaluation."""
    best = 0
    for i, (_, score) in enumerate(evaluations):
        if score > evaluations[best][1]:
            best = i
    return best


def train(
    model,
    dataset: Sequence,
    loss_config: LossConfig,
    train_config: TrainConfig,
    dev_set: Sequence[StsPair],
    test_sets: dict[str, Sequence[StsPair]] | None = None,
    config_snapshot: dict | None = None,
    loss_hook: Callable | None = None,
):
    """Train ``model`` in place and leave it holding the best-dev parameters.

    Returns ``(record, best_state)``. A NaN loss or gradient does not raise:
    the record comes back with ``status="failed"`` and the last good step.
    ``loss_hook(step, loss)`` may replace the loss tensor (fault injection).
    """
    if not len(dev_set):
        raise InputError("dev set is empty")
    if loss_config.variant == "supervised":
        _check_supervised_dataset(dataset)
    cfg = train_config
    total = cfg.total_steps
    interval = eval_interval(cfg.total_examples, cfg.batch_size, cfg.n_evaluations)
    stream = sample_training_stream(dataset, cfg.total_examples, cfg.seed)
    dropout_rng = RngState(cfg.seed, STREAM_DROPOUT)
    opt = OptimizerState.for_params(model.params)
    record = RunRecord(config=config_snapshot if config_snapshot is not None else _snapshot(loss_config, cfg))
    best_state = None
    started = time.perf_counter()

    try:
        for t in range(1, total + 1):
            batch = stream[(t - 1) * cfg.batch_size : t * cfg.batch_size]
            for p in model.params.values():
                p.grad = None
            loss = batch_loss(batch, model, loss_config, dropout_rng)
            if loss_hook is not None:
                loss = loss_hook(t, loss)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"loss is {loss.item()} at step {t}")
            backward(loss)
            lr = lr_at_step(t, total, cfg.peak_lr, cfg.warmup_fraction)
            adamw_step(model.params, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            record.last_good_step = t
            if t % interval == 0:
                score = evaluate_sts(model, dev_set, name="dev").spearman_x100
                record.evaluations.append((t, score))
                if record.best_dev is None or score > record.best_dev:
                    record.best_dev, record.best_step = score, t
                    best_state = model.state_dict()
                log.debug("step %d/%d loss %.5f dev %.2f", t, total, loss.item(), score)
    except (NonFiniteError, UndefinedCorrelationError) as exc:
        record.status = "failed"
        record.error = f"{exc.kind}: {exc}"
        log.warning("run aborted after step %d: %s", record.last_good_step, exc)

    if best_state is not None:
        model.load_state_dict(best_state)
    if not record.failed:
        for name, pairs in (test_sets or {}).items():
            record.test_scores[name] = evaluate_sts(model, pairs, name=name).spearman_x100
    record.wall_time = time.perf_counter() - started
    return record, best_state


def _check_supervised_dataset(dataset) -> None:
    flags = {ex.hard_negative is not None for ex in dataset}
    if len(flags) > 1:
        raise InputError("supervised training data mixes triplets and pairs; split it or drop the negatives")
    if any(not isinstance(ex, TrainExample) or ex.positive is None for ex in dataset):
        raise InputError("supervised training data needs (anchor, positive[, hard negative]) examples")


def _snapshot(loss_config: LossConfig, train_config: TrainConfig) -> dict:
    return {"loss": asdict(loss_config), "train": asdict(train_config)}
