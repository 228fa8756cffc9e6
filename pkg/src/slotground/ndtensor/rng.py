"""Counter-based deterministic random streams.

Every draw instantiates a fresh Philox generator keyed by
``(seed, counter)`` and bumps the counter, so the full stream state is
two integers. That makes streams trivially serializable (checkpoints
store the pair), reproducible across platforms, and cheap to fork:
`derive` hashes the parent seed with a stream tag through numpy's
`SeedSequence`.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_entropy(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag)!r}")


class Rng:
    """Deterministic stream of draws, state = (seed, counter)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *tags) -> "Rng":
        """Independent child stream; same tags always give the same child."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(_as_entropy(t) for t in tags))
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"
