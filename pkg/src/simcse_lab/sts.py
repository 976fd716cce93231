"""STS pair files, tie-aware Spearman correlation, and encoder evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InputError, ParseError, UndefinedCorrelationError
from .tensor import no_grad


@dataclass(frozen=True)
class StsPair:
    sentence_a: str
    sentence_b: str
    gold_score: float


@dataclass(frozen=True)
class StsReport:
    name: str
    n_pairs: int
    spearman_x100: float

    def render(self) -> str:
        return f"{self.name}\t{self.spearman_x100:.2f}"


def load_sts_tsv(path) -> list[StsPair]:
    """Parse ``sentence_a<TAB>sentence_b<TAB>score`` lines.

    Lines starting with ``#`` are skipped (headers, comments); blank lines too.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", lineno, path)
            try:
                score = float(cols[2])
            except ValueError:
                raise ParseError(f"score {cols[2]!r} is not a number", lineno, path) from None
            if not math.isfinite(score):
                raise ParseError(f"score {cols[2]!r} is not finite", lineno, path)
            pairs.append(StsPair(cols[0], cols[1], score))
    if not pairs:
        raise InputError(f"{path}: no STS pairs found")
    return pairs


def write_sts_tsv(pairs: Sequence[StsPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# sentence_a\tsentence_b\tscore\n")
        for p in pairs:
            fh.write(f"{p.sentence_a}\t{p.sentence_b}\t{p.gold_score!r}\n")


def average_ranks(x) -> np.ndarray:
    return kernels.average_ranks(np.ascontiguousarray(x, dtype=np.float64))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / denom


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"spearman needs two 1-D sequences of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("spearman needs at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("spearman is undefined for a constant sequence")
    rho = _pearson(average_ranks(x), average_ranks(y))
    return min(1.0, max(-1.0, rho))


def embed_sentences(model, sentences: Sequence[str], strategy: str | None = None, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Eval-mode embeddings keyed by sentence.

    Unique sentences are embedded in sorted order so every vector is computed
    from the same batch regardless of how the caller orders its input.
    """
    unique = sorted(set(sentences))
    out = {}
    with no_grad():
        for start in range(0, len(unique), batch_size):
            chunk = unique[start : start + batch_size]
            vecs = model.embed(chunk, strategy=strategy).values
            out.update(zip(chunk, vecs))
    return out


def predicted_similarities(model, pairs: Sequence[StsPair], strategy: str | None = None) -> np.ndarray:
    """Eval-mode cosine per pair."""
    emb = embed_sentences(model, [s for p in pairs for s in (p.sentence_a, p.sentence_b)], strategy)
    a = np.stack([emb[p.sentence_a] for p in pairs])
    b = np.stack([emb[p.sentence_b] for p in pairs])
    return (a * b).sum(axis=1) / np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))


def evaluate_sts(model, pairs: Sequence[StsPair], strategy: str | None = None, name: str = "sts") -> StsReport:
    if not pairs:
        raise InputError(f"{name}: no pairs to evaluate")
    sims = predicted_similarities(model, pairs, strategy)
    gold = np.array([p.gold_score for p in pairs])
    # rounding noise around a constant prediction carries no ranking information
    if np.ptp(sims) <= 1e-12:
        raise UndefinedCorrelationError(f"{name}: predicted similarities are constant")
    try:
        rho = spearman(sims, gold)
    except UndefinedCorrelationError as exc:
        raise UndefinedCorrelationError(f"{name}: {exc}") from None
    return StsReport(name, len(pairs), 100.0 * rho)
