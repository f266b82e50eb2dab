"""Deterministic counter-based random number generation.

Every stochastic piece of the toolkit (weight init, batch sampling, corpus
synthesis, CDC batch draws) pulls from a ``CounterRng``.  The generator is a
splitmix64 mix function applied to ``seed ^ counter`` words, so a stream is a
pure function of ``(seed, counter)`` and produces identical values on any
platform and numpy version.  Named child streams let independent consumers
(e.g. data sampling vs. CDC sampling) advance without disturbing each other,
which is what makes twin training runs step-aligned.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise over uint64 (wraparound intended)."""
    with np.errstate(over="ignore"):
        z = (z + _GAMMA).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash_tag(tag: str) -> np.uint64:
    """FNV-1a over the utf-8 bytes of a stream tag."""
    h = 0xCBF29CE484222325
    for b in tag.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(h)


class CounterRng:
    """Counter-mode RNG: draws are mix(seed ^ counter), counter increments.

    ``stream(tag)`` derives an independent child generator whose seed folds in
    a hash of the tag; children never share counter state with the parent.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = np.uint64(counter)

    def stream(self, tag: str) -> "CounterRng":
        return CounterRng(int(_mix(np.atleast_1d(self.seed ^ _hash_tag(tag)))[0]))

    def state(self) -> tuple[int, int]:
        return (int(self.seed), int(self.counter))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(int(self.counter), int(self.counter) + n, dtype=np.uint64)
        self.counter = np.uint64(int(self.counter) + n)
        return _mix(self.seed ^ idx)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = (self._words(2 * m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u1 = np.clip(u[:m], 2.0 ** -53, None)
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        z = z * std
        return z.reshape(shape) if shape else float(z[0])

    def randint(self, upper: int, shape=()) -> np.ndarray:
        """Integers in [0, upper) by 64-bit modular reduction.

        The modulo bias is < upper / 2**64, negligible for corpus-sized upper
        bounds; keeping the draw single-word keeps streams easy to reason
        about.
        """
        if upper <= 0:
            raise ValueError("upper bound must be positive")
        n = int(np.prod(shape)) if shape else 1
        v = (self._words(n) % np.uint64(upper)).astype(np.int64)
        return v.reshape(shape) if shape else int(v[0])

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
