"""Dense, batch-norm, ReLU, dropout and Gaussian-noise layers with hand-written backward passes.

Every layer exposes two levels:

* ``fwd(x, ...) -> (y, cache)`` / ``bwd(grad, cache) -> (dx, param_grads)``: pure
  functions over explicit caches, used by the ladder where one set of parameters
  serves both the clean and the noisy pass;
* ``forward`` / ``backward``: the usual stateful wrappers that keep the last cache.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from ladder_ser.errors import DegenerateBatchError, DimensionError, ParameterError, StateError
from ladder_ser.numerics import RngStream, sample_gaussian

TRAIN = "train"
EVAL = "eval"

Grads = Dict[str, np.ndarray]


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")


class Layer:
    params: Dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads: Grads = {}
        self._cache = None
        self._cached = False

    def fwd(self, x, *args, **kwargs):
        raise NotImplementedError

    def bwd(self, grad, cache) -> Tuple[np.ndarray, Grads]:
        raise NotImplementedError

    def forward(self, x, *args, **kwargs):
        y, self._cache = self.fwd(x, *args, **kwargs)
        self._cached = True
        return y

    def backward(self, grad):
        if not self._cached:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        dx, self.grads = self.bwd(grad, self._cache)
        self._cache, self._cached = None, False
        return dx, self.grads


class Dense(Layer):
    """Affine map ``x @ W.T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, rng: Optional[RngStream] = None, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            w = np.zeros((n_out, n_in), dtype=dtype)
        else:
            # He-style scaling for ReLU stacks
            w = rng.normal((n_out, n_in), dtype=np.float64) * np.sqrt(2.0 / n_in)
        self.params["W"] = w.astype(dtype)
        if bias:
            self.params["b"] = np.zeros(n_out, dtype=dtype)

    @property
    def has_bias(self) -> bool:
        return "b" in self.params

    def fwd(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense layer expects width {self.n_in}, got shape {x.shape}")
        y = x @ self.params["W"].T
        if self.has_bias:
            y = y + self.params["b"]
        return y, x

    def bwd(self, grad, cache):
        x = cache
        grads = {"W": grad.T @ x}
        if self.has_bias:
            grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"], grads


class BatchNorm(Layer):
    """Per-feature batch normalization followed by a trainable scale and bias.

    The normalization and the scale/bias steps are also available separately
    (``normalize_fwd`` / ``affine_fwd``) because the ladder injects noise between them.
    """

    def __init__(self, width: int, epsilon: float = 1e-5, momentum: float = 0.99,
                 dtype=np.float32, affine: bool = True):
        super().__init__()
        if epsilon <= 0:
            raise ParameterError("epsilon must be positive")
        self.width = width
        self.epsilon = epsilon
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.params["gamma"] = np.ones(width, dtype=dtype)
            self.params["beta"] = np.zeros(width, dtype=dtype)
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)

    def batch_stats(self, x):
        return x.mean(axis=0), x.var(axis=0)

    def normalize_fwd(self, x, mode: str = TRAIN, update_running: bool = True):
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.width:
            raise DimensionError(f"batch norm expects width {self.width}, got shape {x.shape}")
        if mode == TRAIN:
            if x.shape[0] < 2:
                raise DegenerateBatchError("batch normalization in train mode needs at least 2 samples")
            mean, var = self.batch_stats(x)
            if update_running:
                m = self.momentum
                self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype)
                self.running_var = (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
        xhat = (x - mean) * inv_std
        return xhat, (xhat, inv_std, mode)

    def normalize_bwd(self, grad, cache):
        xhat, inv_std, mode = cache
        if mode == EVAL:
            return grad * inv_std
        n = grad.shape[0]
        g_sum = grad.sum(axis=0)
        gx_sum = (grad * xhat).sum(axis=0)
        return (inv_std / n) * (n * grad - g_sum - xhat * gx_sum)

    def affine_fwd(self, xhat):
        if not self.affine:
            return xhat, None
        return self.params["gamma"] * xhat + self.params["beta"], xhat

    def affine_bwd(self, grad, cache):
        if not self.affine:
            return grad, {}
        xhat = cache
        grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        return grad * self.params["gamma"], grads

    def fwd(self, x, mode: str = TRAIN):
        xhat, ncache = self.normalize_fwd(x, mode)
        y, acache = self.affine_fwd(xhat)
        return y, (ncache, acache)

    def bwd(self, grad, cache):
        ncache, acache = cache
        g, grads = self.affine_bwd(grad, acache)
        return self.normalize_bwd(g, ncache), grads


class ReLU(Layer):
    def fwd(self, x):
        mask = x > 0
        return x * mask, mask

    def bwd(self, grad, cache):
        return grad * cache, {}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time, eval is the identity."""

    def __init__(self, p: float):
        super().__init__()
        if not 0 <= p < 1:
            raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def fwd(self, x, mode: str = TRAIN, rng: Optional[RngStream] = None):
        _check_mode(mode)
        if mode == EVAL or self.p == 0:
            return x, None
        if rng is None:
            raise ParameterError("dropout in train mode needs a random stream")
        keep = rng.uniform(x.shape) >= self.p
        mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * mask, mask

    def bwd(self, grad, cache):
        if cache is None:
            return grad, {}
        return grad * cache, {}


class GaussianNoise(Layer):
    """Adds N(0, sigma^2) noise on the noisy path in train mode; identity otherwise."""

    def __init__(self, sigma: float):
        super().__init__()
        if sigma < 0:
            raise ParameterError(f"noise sigma must be non-negative, got {sigma}")
        self.sigma = sigma

    def fwd(self, x, mode: str = TRAIN, rng: Optional[RngStream] = None, clean: bool = False):
        _check_mode(mode)
        if clean or mode == EVAL or self.sigma == 0:
            return x, None
        if rng is None:
            raise ParameterError("noise injection needs a random stream")
        return x + sample_gaussian(x.shape, self.sigma, rng, dtype=x.dtype.type), None

    def bwd(self, grad, cache):
        return grad, {}
