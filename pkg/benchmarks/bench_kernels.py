"""Numba kernels vs the numpy reference path.

    python3 benchmarks/bench_kernels.py [--repeat N] [--steps N]

Part one times each kernel in-process on shapes typical of the synthetic
desk config. Part two trains a short run under each backend in a fresh
interpreter (the backend is fixed at import time) and reports ms per step.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from simcse_lab.kernels import _numba, _numpy

STEP_SCRIPT = """
import sys, time
from simcse_lab.encoder import EncoderConfig, EncoderModel, build_vocab
from simcse_lab.losses import LossConfig
from simcse_lab.synthetic import SyntheticCorpus
from simcse_lab.trainer import TrainConfig, train
steps = int(sys.argv[1])
corpus = SyntheticCorpus(0)
data, dev = corpus.sentences(2048), corpus.sts_pairs(100)
cfg = EncoderConfig(d_model=32, n_heads=4, d_ff=64, max_seq_len=16, init_std=0.1)
warm = EncoderModel.initialize(cfg, build_vocab(data, cfg), 0)
train(warm, data, LossConfig(), TrainConfig(batch_size=64, total_examples=64 * 2, n_evaluations=1), dev)
model = EncoderModel.initialize(cfg, build_vocab(data, cfg), 0)
t = time.perf_counter()
train(model, data, LossConfig(), TrainConfig(batch_size=64, total_examples=64 * steps, n_evaluations=1), dev)
print((time.perf_counter() - t) / steps * 1e3)
"""


def kernel_cases(rs):
    att = rs.normal(size=(128 * 4 * 13, 13))
    act = rs.normal(size=(128 * 13, 64))
    hid = rs.normal(size=(128 * 13, 32))
    g32 = rs.normal(size=32)
    _, xhat, rstd = _numpy.layer_norm_forward(hid, g32, g32, 1e-12)
    ids = rs.integers(0, 44, size=128 * 13)
    return {
        "softmax_rows": lambda m: m.softmax_rows(att),
        "softmax_rows_backward": lambda m: m.softmax_rows_backward(att, att),
        "log_softmax_rows": lambda m: m.log_softmax_rows(att),
        "layer_norm_forward": lambda m: m.layer_norm_forward(hid, g32, g32, 1e-12),
        "layer_norm_backward": lambda m: m.layer_norm_backward(hid, xhat, rstd, g32),
        "gelu": lambda m: m.gelu(act),
        "gelu_backward": lambda m: m.gelu_backward(act, act),
        "embedding_backward": lambda m: m.embedding_backward(ids, hid, 44),
        "average_ranks": lambda m: m.average_ranks(rs.integers(0, 50, size=1000).astype(float)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=40)
    args = ap.parse_args(argv)

    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases(np.random.default_rng(0)).items():
        fn(_numba)  # compile / load cache
        t_nb = timeit.timeit(lambda: fn(_numba), number=args.repeat) / args.repeat * 1e3
        t_np = timeit.timeit(lambda: fn(_numpy), number=args.repeat) / args.repeat * 1e3
        print(f"{name:<26}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.1f}x")

    print(f"\n{'train step (d32, bs64)':<26}{'ms/step':>10}")
    for backend in ("numba", "numpy"):
        env = {**os.environ, "SIMCSE_LAB_BACKEND": backend}
        out = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT, str(args.steps)], env=env, capture_output=True, text=True, check=True
        )
        print(f"{backend:<26}{float(out.stdout):>10.1f}")


if __name__ == "__main__":
    main()
