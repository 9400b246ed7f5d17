import numpy as np
import pytest

from ladder_ser.errors import DivergenceError
from ladder_ser.optimizer import Nadam


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    Nadam(lr=0.1).step(p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [1.0, -2.0]


def test_first_step_magnitude():
    p = {"w": np.array([0.0])}
    Nadam(lr=1e-3).step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-1e-3, rel=1e-6)


@pytest.mark.parametrize("g", [1e-6, 0.3, -7.0, 1e4])
def test_first_step_scale_free(g):
    p = {"w": np.array([0.0])}
    Nadam(lr=1e-3).step(p, {"w": np.array([g])})
    assert abs(p["w"][0]) <= 1e-3 * (1 + 1e-6)


def test_matches_hand_unrolled_updates():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.9]
    theta, m, n = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        n = b2 * n + (1 - b2) * g * g
        m_hat, n_hat = m / (1 - b1**t), n / (1 - b2**t)
        theta -= lr * (b1 * m_hat + (1 - b1) * g) / (np.sqrt(n_hat) + eps)
    p = {"w": np.array([1.0])}
    opt = Nadam(lr=lr)
    for g in grads:
        opt.step(p, {"w": np.array([g])})
    assert p["w"][0] == pytest.approx(theta, rel=1e-14)
    assert opt.state.t == 3


def test_deterministic_trajectories():
    def run():
        p = {"w": np.linspace(-1, 1, 5).astype(np.float32)}
        opt = Nadam(lr=1e-2)
        for k in range(20):
            opt.step(p, {"w": np.sin(p["w"] * (k + 1)).astype(np.float32)})
        return p["w"].tobytes()
    assert run() == run()


def test_nonfinite_gradient_refused():
    p = {"w": np.array([1.0])}
    opt = Nadam()
    with pytest.raises(DivergenceError):
        opt.step(p, {"w": np.array([np.nan])})
    assert p["w"][0] == 1.0 and opt.state.t == 0
