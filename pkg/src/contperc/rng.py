"""Counter-based seeded randomness.

Every random draw in the package is addressed by a :class:`SeedKey` (an
experiment seed plus a path of ``(label, index)`` pairs).  Two keys with
different paths give independent streams, and the same key always gives the
same draws, regardless of the order in which streams are consumed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class SeedKey:
    seed: int
    path: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "path", tuple((str(a), int(b)) for a, b in self.path))

    def child(self, label: str, index: int = 0) -> "SeedKey":
        return SeedKey(self.seed, self.path + ((label, int(index)),))

    @property
    def key(self) -> int:
        """64-bit digest of the full key."""
        h = hashlib.blake2b(repr((self.seed, self.path)).encode(), digest_size=16)
        return int.from_bytes(h.digest()[:8], "little")

    def generator(self) -> np.random.Generator:
        h = hashlib.blake2b(repr((self.seed, self.path)).encode(), digest_size=16)
        return np.random.Generator(np.random.Philox(key=int.from_bytes(h.digest(), "little")))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "path": [list(p) for p in self.path]}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedKey":
        return cls(int(d["seed"]), tuple((str(a), int(b)) for a, b in d.get("path", [])))


def mix64(x):
    """splitmix64 finalizer, elementwise on uint64 arrays."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def lattice_keys(base: int, z) -> np.ndarray:
    """Per-lattice-site stream keys derived from ``base``; ``z`` is (n, d) int."""
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    k = np.full(z.shape[0], base & _MASK64, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for a in range(z.shape[1]):
            k = mix64(k ^ (z[:, a].astype(np.uint64) * _GOLDEN + np.uint64(a + 1)))
    return k


def counter_uniforms(keys, counters) -> np.ndarray:
    """Uniforms in the open interval (0, 1) addressed by (key, counter)."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = mix64(mix64(keys ^ (counters * _GOLDEN)) + counters)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
