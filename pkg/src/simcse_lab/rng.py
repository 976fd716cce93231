"""Seeded, position-addressable random state.

Draws come from numpy's PCG64. Each float64 draw consumes exactly one 64-bit
output, so ``(seed, stream, position)`` pins down every subsequent draw and a
state can be rebuilt anywhere with ``PCG64.advance``.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence([seed,stream])/float64-per-draw"

# Stream ids keep independent consumers of one run seed apart.
STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_DATA = 2


class RngState:
    __slots__ = ("seed", "stream", "position", "_gen")

    def __init__(self, seed: int, stream: int = 0, position: int = 0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        self.position = int(position)
        bitgen = np.random.PCG64(np.random.SeedSequence([self.seed, self.stream]))
        if self.position:
            bitgen.advance(self.position)
        self._gen = np.random.Generator(bitgen)

    def uniform(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        self.position += out.size
        return out

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        # Box-Muller on our own uniforms so the position counter stays exact.
        size = int(np.prod(shape, dtype=np.int64))
        n_pairs = (size + 1) // 2
        u = self.uniform(2 * n_pairs)
        u1 = 1.0 - u[:n_pairs]  # (0, 1]
        u2 = u[n_pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return (std * z[:size]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Sort-by-key shuffle; one draw per element.
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def integers(self, high: int, size: int) -> np.ndarray:
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def snapshot(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "position": self.position}

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream={self.stream}, position={self.position})"
