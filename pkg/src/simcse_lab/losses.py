"""Contrastive objectives and the batch builders that feed them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderModel, forward, pool
from .errors import ContractError, InputError, ParameterError
from .rng import RngState
from .tensor import Tensor

VARIANTS = ("unsupervised", "supervised")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    variant: str = "unsupervised"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class TrainExample:
    anchor: str
    positive: Optional[str] = None
    hard_negative: Optional[str] = None


def _unit_rows(x: Tensor, name: str) -> Tensor:
    norms = np.sqrt((x.values * x.values).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ContractError(f"zero-norm row {int(zero[0])} in {name}")
    return x / T.sqrt((x * x).sum(axis=1, keepdims=True))


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """``[n, m]`` matrix of row-wise cosines between ``a`` and ``b``."""
    return T.matmul(_unit_rows(a, "a"), _unit_rows(b, "b").T)


def _diagonal_nll(logits: Tensor) -> Tensor:
    # target for row i is column i
    n = logits.shape[0]
    pick = np.zeros(logits.shape)
    pick[np.arange(n), np.arange(n)] = -1.0 / n
    return (T.log_softmax(logits) * Tensor(pick)).sum()


def unsupervised_loss(h1: Tensor, h2: Tensor, temperature: float = 0.05) -> Tensor:
    """In-batch InfoNCE: row i of ``h1`` should pick row i of ``h2``."""
    if h1.shape[0] == 0:
        raise InputError("unsupervised_loss on an empty batch")
    if h1.shape != h2.shape:
        raise InputError(f"view shapes differ: {h1.shape} vs {h2.shape}")
    return _diagonal_nll(cosine_similarity_matrix(h1, h2) * (1.0 / temperature))


def supervised_loss(h_anchor: Tensor, h_pos: Tensor, h_neg: Tensor | None = None, temperature: float = 0.05) -> Tensor:
    """InfoNCE over in-batch positives plus, when given, every hard negative."""
    n = h_anchor.shape[0]
    if n == 0:
        raise InputError("supervised_loss on an empty batch")
    if h_pos.shape[0] != n or (h_neg is not None and h_neg.shape[0] != n):
        shapes = [h_anchor.shape, h_pos.shape] + ([h_neg.shape] if h_neg is not None else [])
        raise InputError(f"row counts differ across anchor/positive/negative: {shapes}")
    sims = cosine_similarity_matrix(h_anchor, h_pos)
    if h_neg is not None:
        sims = T.concat([sims, cosine_similarity_matrix(h_anchor, h_neg)], axis=1)
    return _diagonal_nll(sims * (1.0 / temperature))


def build_unsupervised_batch(sentences: Sequence[str], model: EncoderModel, rng: RngState):
    """Two training-mode passes over the same batch; ``rng`` advances in between."""
    batch = model.encode(sentences)
    strategy, pooler = model.config.pooling, model.pooler()
    h1 = _pool(model, batch, rng, strategy, pooler)
    h2 = _pool(model, batch, rng, strategy, pooler)
    return h1, h2


def build_supervised_batch(examples: Sequence[TrainExample], model: EncoderModel, rng: RngState):
    """Pooled (anchor, positive, hard-negative-or-None) matrices."""
    if any(ex.positive is None for ex in examples):
        raise InputError("supervised examples need a positive sentence")
    with_neg = [ex.hard_negative is not None for ex in examples]
    if any(with_neg) and not all(with_neg):
        raise InputError(
            f"mixed batch: {sum(with_neg)} of {len(examples)} examples carry a hard negative"
        )
    strategy, pooler = model.config.pooling, model.pooler()
    h_a = _pool(model, model.encode([ex.anchor for ex in examples]), rng, strategy, pooler)
    h_p = _pool(model, model.encode([ex.positive for ex in examples]), rng, strategy, pooler)
    h_n = None
    if with_neg and with_neg[0]:
        h_n = _pool(model, model.encode([ex.hard_negative for ex in examples]), rng, strategy, pooler)
    return h_a, h_p, h_n


def _pool(model, batch, rng, strategy, pooler):
    return pool(forward(model, batch, rng, True), batch.mask, strategy, pooler)


def batch_loss(batch, model: EncoderModel, loss_config: LossConfig, rng: RngState) -> Tensor:
    """Loss for one training batch under ``loss_config.variant``."""
    if loss_config.variant == "unsupervised":
        sentences = [ex.anchor if isinstance(ex, TrainExample) else ex for ex in batch]
        h1, h2 = build_unsupervised_batch(sentences, model, rng)
        return unsupervised_loss(h1, h2, loss_config.temperature)
    h_a, h_p, h_n = build_supervised_batch(batch, model, rng)
    return supervised_loss(h_a, h_p, h_n, loss_config.temperature)
