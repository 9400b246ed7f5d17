"""Concordance correlation, its gradient, and the two significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import betainc

from ladder_ser.errors import DegenerateTestError, DimensionError, ParameterError, UndefinedMetricError

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class MetricValue:
    ccc: float
    pearson: float
    n: int


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"prediction and truth lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedMetricError("CCC needs at least two samples")
    return x, y


def _moments(x, y):
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return mx, my, (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()


def ccc(pred, truth) -> float:
    """Concordance correlation with biased (1/n) moments."""
    x, y = _pair(pred, truth)
    mx, my, vx, vy, cxy = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0 or (vx == 0 and vy == 0):
        raise UndefinedMetricError("CCC is undefined when both series are constant")
    return float(2 * cxy / denom)


def pearson(pred, truth) -> float:
    x, y = _pair(pred, truth)
    _, _, vx, vy, cxy = _moments(x, y)
    if vx == 0 or vy == 0:
        return 0.0
    return float(cxy / math.sqrt(vx * vy))


def metric_value(pred, truth) -> MetricValue:
    return MetricValue(ccc=ccc(pred, truth), pearson=pearson(pred, truth), n=int(np.size(truth)))


def ccc_loss_and_grad(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, np.ndarray]:
    """Return ``1 - ccc`` and its gradient with respect to ``pred``.

    The gradient keeps ``pred``'s shape and dtype; internal arithmetic follows
    ``pred``'s precision.
    """
    pred = np.asarray(pred)
    x = pred.ravel()
    y = np.asarray(truth, dtype=x.dtype).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"prediction and truth lengths differ: {x.size} vs {y.size}")
    n = x.size
    if n < 2:
        raise UndefinedMetricError("CCC needs at least two samples")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy, cxy = (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0 or (vx == 0 and vy == 0):
        raise UndefinedMetricError("CCC is undefined when both series are constant")
    num = 2 * cxy
    # d num / d x_i = 2 dy_i / n ; d denom / d x_i = 2 dx_i / n + 2 (mx - my) / n
    d_num = 2 * dy / n
    d_den = 2 * (dx + (mx - my)) / n
    d_ccc = (d_num * denom - num * d_den) / denom**2
    loss = 1 - num / denom
    return float(loss), (-d_ccc).reshape(pred.shape).astype(pred.dtype, copy=False)


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal, 1 - Phi(z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail of Student's t via the regularized incomplete beta function."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return tail if t > 0 else 1.0 - tail


def fisher_z_test(ccc_a: float, n_a: int, ccc_b: float, n_b: int) -> SignificanceResult:
    """One-tailed test that system ``a`` beats system ``b`` after atanh transform."""
    if n_a <= 3 or n_b <= 3:
        raise ParameterError("the Fisher transform needs more than 3 samples per system")
    for c in (ccc_a, ccc_b):
        if abs(c) >= 1:
            raise ParameterError(f"|ccc| must be < 1 for the Fisher transform, got {c}")
    se = math.sqrt(1.0 / (n_a - 3) + 1.0 / (n_b - 3))
    z = (math.atanh(ccc_a) - math.atanh(ccc_b)) / se
    return SignificanceResult(statistic=z, p_value=normal_sf(z))


def paired_t_test(values_a: Sequence[float], values_b: Sequence[float]) -> SignificanceResult:
    """One-tailed matched-pair t-test of mean(a - b) > 0."""
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("paired t-test needs two 1-D sequences of equal length")
    n = a.size
    if n < 2:
        raise DegenerateTestError("paired t-test needs at least two pairs")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0:
        raise DegenerateTestError("differences have zero variance; t statistic undefined")
    t = diff.mean() / (sd / math.sqrt(n))
    return SignificanceResult(statistic=float(t), p_value=student_t_sf(float(t), n - 1))
