"""Counter-based deterministic random numbers.

The stream is Philox-4x64 keyed directly by ``(seed, stream)``; uniforms are
built from the raw 64-bit words by hand and normals by Box-Muller, so a given
seed produces the same values on every platform and numpy version.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_default_dtype

_U64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _U64
        self.stream = int(stream) & _U64
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    @property
    def counter(self) -> int:
        c = self._bits.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(c)))

    def child(self, stream: int) -> "Rng":
        """Independent stream sharing this seed."""
        return Rng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles strictly inside (0, 1)."""
        words = self.raw(n) >> np.uint64(11)
        return (words.astype(np.float64) + 0.5) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


def gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    if std < 0:
        raise ValueError("std must be non-negative")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    if std == 0:
        data = np.full(shape, mean)
    else:
        data = mean + std * rng.normal(n).reshape(shape)
    return Tensor(data.astype(get_default_dtype()), requires_grad=requires_grad)
