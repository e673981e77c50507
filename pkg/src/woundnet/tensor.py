"""Dense-tensor primitives: allocation, seeded init, matmul, and the RNG.

Tensors are plain numpy arrays in batch x channels x height x width layout
(row-major). Gradient buffers live beside their parameters in dicts, not on
the arrays themselves. Training runs in float32; gradient checking in
float64 (pass ``dtype`` where supported).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Shape = tuple[int, ...]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0 ** -53)


class Rng:
    """SplitMix64 pseudorandom generator.

    Counter-based: draw i is mix64(seed + (i+1) * golden_gamma), so identical
    seeds give identical sequences on every platform and the whole batch of
    draws vectorizes in uint64 arithmetic. Doubles use the top 53 bits.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def next_uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = self._seed + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniform(self, low: float, high: float, shape: Shape | int) -> np.ndarray:
        """Uniform float64 draws in [low, high)."""
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _U53
        return (low + u * (high - low)).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n ints uniform in [low, high)."""
        u = self.uniform(0.0, 1.0, n)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via argsort of random keys."""
        return np.argsort(self.uniform(0.0, 1.0, n), kind="stable")


def validate_shape(shape: Shape) -> Shape:
    shape = tuple(int(d) for d in shape)
    if len(shape) not in (1, 2, 4):
        raise ShapeError(f"rank must be 1, 2, or 4, got {len(shape)}")
    for d in shape:
        if d < 1:
            raise ShapeError(f"dims must be positive, got {shape}")
    return shape


def tensor_new(shape: Shape, fill: float, dtype=np.float32) -> np.ndarray:
    """Freshly allocated tensor with every element equal to ``fill``."""
    return np.full(validate_shape(shape), fill, dtype=dtype)


def kaiming_init(shape: Shape, fan_in: int, rng: Rng, dtype=np.float32) -> np.ndarray:
    """Kaiming-uniform draw in [-b, b], b = sqrt(6 / fan_in).

    Suits the all-ReLU hidden layers; draws are generated in float64 and cast,
    so the value stream is identical for both precisions.
    """
    shape = validate_shape(shape)
    if fan_in < 1:
        raise ShapeError(f"fan_in must be >= 1, got {fan_in}")
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    return a @ b
