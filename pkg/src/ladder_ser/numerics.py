"""Tensor helpers and the seedable random stream.

Tensors are plain ``numpy.ndarray`` values. Training runs in float32, gradient
checks and oracles in float64.
"""

from __future__ import annotations

import numpy as np

from ladder_ser.errors import DimensionError, ParameterError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class RngStream:
    """Deterministic random stream backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill 2014, 128-bit LCG with XSL-RR output) is fully specified and
    its output for a given seed is stable across numpy releases and platforms.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, dtype=CHECK_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(dtype, copy=False)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def fork(self, salt: int) -> "RngStream":
        """Independent child stream derived from this stream's seed and ``salt``."""
        seq = np.random.SeedSequence([self.seed, int(salt)])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def sample_gaussian(shape, sigma: float, rng: RngStream, dtype=CHECK_DTYPE) -> np.ndarray:
    """I.i.d. draws from N(0, sigma^2). ``sigma`` is the standard deviation."""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    draws = rng.normal(shape, dtype=dtype)
    return draws * dtype(sigma) if sigma != 1 else draws


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
