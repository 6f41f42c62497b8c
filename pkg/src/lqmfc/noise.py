"""Counter-based Brownian increment streams.

Every substream is a Philox generator whose 128-bit key is a hash of
``(seed, tag, index...)``. A stream therefore depends only on its own label:
particle ``i`` of common path ``m`` sees the same increments whatever the
ensemble size, the chunking, or the order in which streams are requested.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .model import InitialLaw, ModelError

__all__ = ["NoisePlan", "TAGS"]

TAGS = ("common", "idio", "init", "perturb")


@dataclass(frozen=True)
class NoisePlan:
    seed: int
    n_t: int
    T: float

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ModelError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        object.__setattr__(self, "seed", seed)
        if self.n_t < 1:
            raise ModelError("n_t must be >= 1")
        if not self.T > 0:
            raise ModelError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    def key(self, tag: str, *index: int) -> int:
        if tag not in TAGS:
            raise ModelError(f"unknown stream tag {tag!r}")
        label = ":".join([str(self.seed), tag, *(str(int(i)) for i in index)])
        return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=16).digest(), "little")

    def generator(self, tag: str, *index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(tag, *index)))

    def _increments(self, tag, *index):
        return np.sqrt(self.dt) * self.generator(tag, *index).standard_normal(self.n_t)

    # single streams ------------------------------------------------------
    def common(self, m: int) -> np.ndarray:
        """dW0 increments of common path ``m``, shape (n_t,)."""
        return self._increments("common", m)

    def idio(self, m: int, i: int) -> np.ndarray:
        """dW_i increments of particle ``i`` on common path ``m``, shape (n_t,)."""
        return self._increments("idio", m, i)

    def initial(self, law: InitialLaw, m: int, i: int) -> float:
        if law.kind == "point":
            return law.mean
        return law.sample(self.generator("init", m, i))

    # blocks ----------------------------------------------------------------
    def common_block(self, paths) -> np.ndarray:
        return np.stack([self.common(m) for m in paths]) if len(paths) else np.empty((0, self.n_t))

    def idio_block(self, paths, n: int) -> np.ndarray:
        out = np.empty((len(paths), n, self.n_t))
        for a, m in enumerate(paths):
            for i in range(n):
                out[a, i] = self.idio(m, i)
        return out

    def init_block(self, law: InitialLaw, paths, n: int) -> np.ndarray:
        out = np.empty((len(paths), n))
        for a, m in enumerate(paths):
            for i in range(n):
                out[a, i] = self.initial(law, m, i)
        return out
