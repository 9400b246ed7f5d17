"""Central finite-difference gradient checking (64-bit)."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import numpy as np


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 indices: Optional[Iterable] = None) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``arr``, perturbed in place."""
    out = np.zeros_like(arr, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max absolute discrepancy scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_params(f: Callable[[], float], params: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                 h: float = 1e-5) -> Dict[str, float]:
    """Relative error per named parameter. Parameters absent from ``analytic`` are
    expected to have zero gradient."""
    errors = {}
    for name, arr in params.items():
        num = numeric_grad(f, arr, h)
        ana = analytic.get(name, np.zeros_like(arr))
        errors[name] = relative_error(ana, num)
    return errors
