"""Synthetic corpora with a known similarity structure.

Sentences are strings over a 40-symbol alphabet (kana, tokenised per
character) drawn with Zipf-distributed frequencies. Gold similarity of a pair
is the Jaccard overlap of their symbol sets. Frequent symbols repeat inside a
sentence and swamp count-based features, so an encoder has to learn which
symbols are informative rather than just how often they occur.

    python -m simcse_lab.synthetic OUT_DIR [--seed N]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .losses import TrainExample
from .rng import RngState
from .sts import StsPair, write_sts_tsv

SYMBOLS = tuple(chr(0x3042 + i) for i in range(40))


def jaccard(a: str, b: str) -> float:
    sa, sb = set(a), set(b)
    return len(sa & sb) / len(sa | sb)


class SyntheticCorpus:
    def __init__(self, seed: int, min_len: int = 5, max_len: int = 12, n_symbols: int = 40, zipf: float = 1.5):
        self.rng = RngState(seed, 7)
        self.min_len = min_len
        self.max_len = max_len
        self.symbols = SYMBOLS[:n_symbols]
        weights = 1.0 / np.arange(1, n_symbols + 1) ** zipf
        self.cdf = np.cumsum(weights / weights.sum())

    def _symbol(self) -> str:
        i = int(np.searchsorted(self.cdf, self.rng.uniform(1)[0], side="right"))
        return self.symbols[min(i, len(self.symbols) - 1)]

    def sentence(self) -> str:
        n = self.min_len + int(self.rng.integers(self.max_len - self.min_len + 1, 1)[0])
        return "".join(self._symbol() for _ in range(n))

    def perturb(self, s: str, strength: float) -> str:
        """Replace each symbol with probability ``strength``; shuffle lightly."""
        out = [self._symbol() if u < strength else c for c, u in zip(s, self.rng.uniform(len(s)))]
        # swap a couple of neighbours so order is not a shortcut
        for _ in range(2):
            i = int(self.rng.integers(len(out) - 1, 1)[0])
            out[i], out[i + 1] = out[i + 1], out[i]
        return "".join(out)

    def sentences(self, n: int) -> list[str]:
        return [self.sentence() for _ in range(n)]

    def sts_pairs(self, n: int) -> list[StsPair]:
        pairs = []
        for strength in self.rng.uniform(n):
            a = self.sentence()
            b = self.perturb(a, float(strength))
            pairs.append(StsPair(a, b, jaccard(a, b)))
        return pairs

    def triplets(self, n: int, pos_strength: float = 0.2, neg_strength: float = 0.8) -> list[TrainExample]:
        out = []
        for _ in range(n):
            a = self.sentence()
            out.append(TrainExample(a, self.perturb(a, pos_strength), self.perturb(a, neg_strength)))
        return out


def write_suite(out_dir, seed: int = 0, n_train: int = 8192, n_dev: int = 500, n_test: int = 500, zipf: float = 1.5) -> dict:
    """Write train/dev/test files plus a run config pointing at them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = SyntheticCorpus(seed, zipf=zipf)
    paths = {
        "unsup": out / "train_unsup.txt",
        "sup": out / "train_sup.tsv",
        "dev": out / "dev.tsv",
        "test": out / "test.tsv",
        "config": out / "run.cfg",
    }
    paths["unsup"].write_text("\n".join(corpus.sentences(n_train)) + "\n", encoding="utf-8")
    with open(paths["sup"], "w", encoding="utf-8") as fh:
        for ex in corpus.triplets(n_train):
            fh.write(f"{ex.anchor}\t{ex.positive}\t{ex.hard_negative}\n")
    write_sts_tsv(corpus.sts_pairs(n_dev), paths["dev"])
    write_sts_tsv(corpus.sts_pairs(n_test), paths["test"])
    paths["config"].write_text(
        "\n".join(
            [
                "# synthetic desk-scale run",
                "train_data = train_unsup.txt",
                "dev_sts = dev.tsv",
                "test_sts = test.tsv",
                "variant = unsupervised",
                "d_model = 32",
                "n_heads = 4",
                "d_ff = 64",
                "init_std = 0.1",
                "max_seq_len = 16",
                "batch_size = 64",
                "peak_lr = 5e-4",
                "",
            ]
        ),
        encoding="utf-8",
    )
    return paths


def main(argv=None):
    ap = argparse.ArgumentParser(description="write a synthetic SimCSE corpus")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=8192)
    ap.add_argument("--zipf", type=float, default=1.5, help="symbol frequency exponent")
    args = ap.parse_args(argv)
    for kind, path in write_suite(args.out_dir, args.seed, args.n_train, zipf=args.zipf).items():
        print(f"{kind}\t{path}")


if __name__ == "__main__":
    main()
