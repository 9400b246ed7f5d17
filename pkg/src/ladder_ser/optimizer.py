"""NADAM with constant-beta bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ladder_ser.errors import DimensionError, DivergenceError


@dataclass
class NadamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    n: Dict[str, np.ndarray] = field(default_factory=dict)


class Nadam:
    """Nesterov-accelerated Adam.

    Update per parameter, with ``g`` the gradient::

        m = b1 m + (1 - b1) g          n = b2 n + (1 - b2) g^2
        m_hat = m / (1 - b1^t)         n_hat = n / (1 - b2^t)
        theta -= lr (b1 m_hat + (1 - b1) g) / (sqrt(n_hat) + eps)

    The lookahead term uses the raw gradient, so the numerator is a convex mix of
    the corrected momentum and ``g``. On the first step it equals ``g`` exactly
    and the step length is ``lr`` whatever the gradient scale. Parameters are
    updated in place.
    """

    def __init__(self, lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.state = NadamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        st = self.state
        for name, g in grads.items():
            if name not in params:
                raise DimensionError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name}; step refused")

        st.t += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.t
        c2 = 1.0 - b2**st.t
        for name, g in grads.items():
            p = params[name]
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p)
                st.n[name] = np.zeros_like(p)
            v = st.n[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            direction = (b1 * (m / c1) + (1 - b1) * g) / (np.sqrt(v / c2) + st.epsilon)
            p -= (st.lr * direction).astype(p.dtype, copy=False)
