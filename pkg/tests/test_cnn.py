import numpy as np
import pytest

from ladder_ser.cnn import (
    CnnConfig,
    CnnModel,
    ConvBlock,
    cnn_baseline_cost,
    cnn_encode,
    conv1d_forward,
    maxpool1d_bwd,
    maxpool1d_forward,
    maxpool1d_fwd,
    tau_clean_targets,
    tau_ladder_cost,
)
from ladder_ser.errors import DimensionError
from ladder_ser.gradcheck import numeric_grad, relative_error
from ladder_ser.ladder import CostWeights
from ladder_ser.numerics import RngStream

from conftest import ToyBatch, jitter_params, ladder_gradient_errors, randn


def toy_config(**kw):
    base = dict(in_channels=4, frames=16, filters=(3, 3), kernels=(3, 2), pools=(2, 2), fc=(5, 4))
    base.update(kw)
    return CnnConfig(**base)


def test_conv_identity_kernel():
    blk = ConvBlock(3, 3, 1, 1, dtype=np.float64)
    blk.params["W"][:, :, 0] = np.eye(3)
    x = randn(0, 2, 3, 8)
    assert np.array_equal(conv1d_forward(blk, x), np.maximum(x, 0))


def test_conv_zero_input_gives_bias_map():
    blk = ConvBlock(2, 3, 5, 1, RngStream(0), dtype=np.float64)
    blk.params["b"][:] = [0.5, -1.0, 2.0]
    out = conv1d_forward(blk, np.zeros((1, 2, 7)))
    assert np.array_equal(out[0], np.repeat([[0.5], [0.0], [2.0]], 7, axis=1))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv1d_forward(ConvBlock(3, 2, 3, 1), np.zeros((1, 4, 8)))


@pytest.mark.parametrize("kernel", [1, 2, 3, 8])
def test_conv_gradients(kernel):
    blk = ConvBlock(3, 4, kernel, 1, RngStream(0), dtype=np.float64)
    blk.params["b"][:] = randn(1, 4) * 0.1
    x, up = randn(2, 2, 3, 8), randn(3, 2, 4, 8)

    def f():
        return float((blk.conv_fwd(x)[0] * up).sum())

    _, cache = blk.conv_fwd(x)
    dx, grads = blk.conv_bwd(up, cache)
    errs = [relative_error(dx, numeric_grad(f, x))]
    errs += [relative_error(grads[k], numeric_grad(f, v)) for k, v in blk.params.items()]
    assert max(errs) < 1e-4


def test_maxpool_examples():
    x = np.array([[[1.0, 3.0, 2.0, 0.0]]])
    assert maxpool1d_forward(2, x).tolist() == [[[3.0, 2.0]]]
    assert np.array_equal(maxpool1d_forward(1, x), x)
    assert maxpool1d_forward(2, np.arange(5.0).reshape(1, 1, 5)).shape == (1, 1, 2)


def test_maxpool_routes_to_first_argmax_and_conserves_mass():
    x = np.array([[[2.0, 2.0, 1.0, 5.0, 0.0]]])
    out, cache = maxpool1d_fwd(x, 2)
    dx = maxpool1d_bwd(np.array([[[1.5, -2.0]]]), cache, 2)
    assert dx.tolist() == [[[1.5, 0.0, 0.0, -2.0, 0.0]]]
    g = randn(1, 3, 4, 7)
    _, cache = maxpool1d_fwd(randn(2, 3, 4, 21), 3)
    assert maxpool1d_bwd(g, cache, 3).sum() == pytest.approx(g.sum(), abs=1e-12)


def test_default_shapes():
    cfg = CnnConfig()
    assert cfg.temporal_lengths() == [500, 250, 125, 62]
    assert cfg.flatten_width == 62 * 128
    model = CnnModel(cfg, RngStream(0))
    flat, _ = model.conv_stack(np.zeros((2, 65, 1000), dtype=np.float32))
    assert flat.shape == (2, 7936)
    assert model.recon_layers == [1, 2]


def test_mfb_input_same_temporal_shapes():
    cfg = CnnConfig(in_channels=40)
    assert cfg.temporal_lengths() == CnnConfig().temporal_lengths()
    assert cfg.flatten_width == CnnConfig().flatten_width


def test_wrong_frame_count():
    with pytest.raises(DimensionError):
        CnnModel(toy_config(), RngStream(0)).conv_stack(np.zeros((2, 4, 15)))


def test_zero_batch_is_deterministic_and_finite():
    model = CnnModel(toy_config(), RngStream(0))
    a = cnn_encode(model, np.zeros((3, 4, 16)))
    b = cnn_encode(model, np.zeros((3, 4, 16)))
    for u, v in zip(a, b):
        assert np.isfinite(u).all() and np.array_equal(u, v)
    assert a[0].shape == (3, 5) and a[1].shape == (3, 4) and a[2].shape == (3, 1)


def test_tau_reconstructs_two_layers():
    model = CnnModel(toy_config(), RngStream(0), np.float64)
    res = tau_ladder_cost(model, ToyBatch(randn(0, 4, 4, 16), randn(1, 4, 3)), CostWeights(lambdas=(1.0,)),
                          RngStream(1), update_running=False)
    assert sorted(res.per_layer) == [1, 2]


@pytest.mark.parametrize("task", ["STL", "MTL"])
def test_tau_collapse_to_cnn_baseline(task):
    model = CnnModel(toy_config(task=task, sigma=0.0), RngStream(0), np.float64)
    jitter_params(model, prefix="fc.")
    w = CostWeights(lambdas=(0.0,), alpha=0.4, beta=0.4)
    for seed in range(3):
        batch = ToyBatch(randn(seed, 6, 4, 16), randn(seed + 50, 6, 3))
        lad = tau_ladder_cost(model, batch, w, RngStream(seed), update_running=False)
        base = cnn_baseline_cost(model, batch, w, RngStream(seed), update_running=False)
        assert abs(lad.cost - base.cost) < 1e-10
        for k, g in base.grads.items():
            np.testing.assert_allclose(lad.grads[k], g, atol=1e-10)


@pytest.mark.parametrize("task", ["STL", "MTL"])
def test_tau_gradients(task):
    model = CnnModel(toy_config(task=task), RngStream(0), np.float64)
    jitter_params(model)
    batch = ToyBatch(randn(3, 4, 4, 16), randn(4, 4, 3))
    w = CostWeights(lambdas=(0.7, 1.3), alpha=0.5, beta=0.2)
    errs = ladder_gradient_errors(model, batch, w, tau_ladder_cost, tau_clean_targets)
    assert max(errs.values()) < 1e-4, errs
