"""Frame-level CNN encoder and its tau-ladder variant.

Four blocks of same-padded temporal convolution + ReLU + non-overlapping max
pooling, then flatten and two fully connected layers. The fully connected part is
a :class:`~ladder_ser.ladder.LadderModel` whose input is the flattened conv output,
so in the tau variant noise starts at the flatten boundary and only fc1/fc2 are
reconstructed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ladder_ser.errors import DimensionError, ParameterError
from ladder_ser.ladder import (
    STL,
    CostResult,
    CostWeights,
    LadderConfig,
    LadderModel,
    _batch_parts,
    clean_encode,
    clean_targets,
    ladder_cost,
    supervised_only_cost,
)
from ladder_ser.layers import EVAL
from ladder_ser.numerics import RngStream


class ConvBlock:
    """1-D convolution along time (same padding) followed by ReLU."""

    def __init__(self, c_in: int, filters: int, kernel: int, pool: int, rng=None, dtype=np.float32):
        if kernel < 1 or pool < 1:
            raise ParameterError("kernel and pool sizes must be at least 1")
        self.c_in, self.filters, self.kernel, self.pool = c_in, filters, kernel, pool
        if rng is None:
            w = np.zeros((filters, c_in, kernel))
        else:
            w = rng.normal((filters, c_in, kernel)) * math.sqrt(2.0 / (c_in * kernel))
        self.params = {"W": w.astype(dtype), "b": np.zeros(filters, dtype=dtype)}

    def conv_fwd(self, x):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise DimensionError(f"conv block expects {self.c_in} input channels, got shape {x.shape}")
        b, c, t = x.shape
        k = self.kernel
        left = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (left, k - 1 - left)))
        cols = sliding_window_view(xp, k, axis=2)  # (b, c, t, k)
        cols = cols.transpose(0, 2, 1, 3).reshape(b * t, c * k)
        wmat = self.params["W"].reshape(self.filters, c * k)
        pre = (cols @ wmat.T).reshape(b, t, self.filters).transpose(0, 2, 1) + self.params["b"][:, None]
        out = np.maximum(pre, 0)
        return out, (cols, pre > 0, x.shape)

    def conv_bwd(self, grad, cache):
        cols, active, (b, c, t) = cache
        k = self.kernel
        dpre = grad * active  # (b, o, t)
        dflat = dpre.transpose(0, 2, 1).reshape(b * t, self.filters)
        grads = {
            "W": (dflat.T @ cols).reshape(self.filters, c, k),
            "b": dpre.sum(axis=(0, 2)),
        }
        dcols = (dflat @ self.params["W"].reshape(self.filters, c * k)).reshape(b, t, c, k)
        dxp = np.zeros((b, c, t + k - 1), dtype=grad.dtype)
        for j in range(k):
            dxp[:, :, j:j + t] += dcols[:, :, :, j].transpose(0, 2, 1)
        left = (k - 1) // 2
        return dxp[:, :, left:left + t], grads


def conv1d_forward(block: ConvBlock, x) -> np.ndarray:
    return block.conv_fwd(np.asarray(x))[0]


def maxpool1d_fwd(x, ps: int):
    """Non-overlapping max over windows of ``ps`` frames; trailing frames are dropped."""
    if ps < 1:
        raise ParameterError("pool size must be at least 1")
    b, c, t = x.shape
    tp = t // ps
    win = x[:, :, :tp * ps].reshape(b, c, tp, ps)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, (arg, x.shape)


def maxpool1d_bwd(grad, cache, ps: int):
    arg, (b, c, t) = cache
    tp = grad.shape[2]
    dwin = np.zeros((b, c, tp, ps), dtype=grad.dtype)
    np.put_along_axis(dwin, arg[..., None], grad[..., None], axis=3)
    dx = np.zeros((b, c, t), dtype=grad.dtype)
    dx[:, :, :tp * ps] = dwin.reshape(b, c, tp * ps)
    return dx


def maxpool1d_forward(ps: int, x) -> np.ndarray:
    return maxpool1d_fwd(np.asarray(x), ps)[0]


@dataclass
class CnnConfig:
    in_channels: int = 65
    frames: int = 1000
    filters: Tuple[int, ...] = (64, 64, 128, 128)
    kernels: Tuple[int, ...] = (8, 8, 8, 8)
    pools: Tuple[int, ...] = (2, 2, 2, 2)
    fc: Tuple[int, ...] = (256, 256)
    task: str = STL
    sigma: float = math.sqrt(0.3)
    dropout: float = 0.0
    combinator: str = "mlp"

    def __post_init__(self):
        if not (len(self.filters) == len(self.kernels) == len(self.pools)):
            raise ParameterError("filters, kernels and pools must have one entry per block")

    def temporal_lengths(self) -> List[int]:
        lengths, t = [], self.frames
        for ps in self.pools:
            t //= ps
            lengths.append(t)
        return lengths

    @property
    def flatten_width(self) -> int:
        return self.temporal_lengths()[-1] * self.filters[-1]


class CnnModel:
    def __init__(self, config: CnnConfig, rng: RngStream, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if config.temporal_lengths()[-1] < 1:
            raise ParameterError("pooling reduces the time axis to zero frames")
        chans = [config.in_channels, *config.filters]
        self.blocks = [
            ConvBlock(chans[i], config.filters[i], config.kernels[i], config.pools[i], rng, dtype)
            for i in range(len(config.filters))
        ]
        self.fc = LadderModel(
            LadderConfig(
                input_dim=config.flatten_width,
                hidden=tuple(config.fc),
                task=config.task,
                sigma=config.sigma,
                input_dropout=config.dropout,
                hidden_dropout=config.dropout,
                reconstruct_input=False,
                combinator=config.combinator,
            ),
            rng,
            dtype,
        )

    @property
    def recon_layers(self):
        return self.fc.recon_layers

    def parameters(self):
        out = {f"conv{i + 1}.{k}": v for i, blk in enumerate(self.blocks) for k, v in blk.params.items()}
        out.update({f"fc.{k}": v for k, v in self.fc.parameters().items()})
        return out

    def buffers(self):
        return {f"fc.{k}": v for k, v in self.fc.buffers().items()}

    def set_buffers(self, values):
        self.fc.set_buffers({k[3:]: v for k, v in values.items() if k.startswith("fc.")})

    def load_parameters(self, values):
        for i, blk in enumerate(self.blocks):
            for k, arr in blk.params.items():
                src = np.asarray(values[f"conv{i + 1}.{k}"])
                if src.shape != arr.shape:
                    raise DimensionError(f"conv{i + 1}.{k}: shape {src.shape} != {arr.shape}")
                np.copyto(arr, src.astype(arr.dtype))
        self.fc.load_parameters({k[3:]: v for k, v in values.items() if k.startswith("fc.")})

    def conv_stack(self, x):
        x = np.asarray(x, dtype=self.dtype)
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.frames:
            raise DimensionError(f"expected input (batch, {cfg.in_channels}, {cfg.frames}), got {x.shape}")
        caches = []
        h = x
        for blk in self.blocks:
            h, c_conv = blk.conv_fwd(h)
            h, c_pool = maxpool1d_fwd(h, blk.pool)
            caches.append((c_conv, c_pool))
        return h.reshape(h.shape[0], -1), (caches, h.shape)

    def conv_backward(self, dflat, cache):
        caches, shape = cache
        g = dflat.reshape(shape)
        grads = {}
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            c_conv, c_pool = caches[i]
            g = maxpool1d_bwd(g, c_pool, blk.pool)
            g, bg = blk.conv_bwd(g, c_conv)
            grads.update({f"conv{i + 1}.{k}": v for k, v in bg.items()})
        return g, grads

    def predict(self, x):
        return cnn_encode(self, x)[2]


def cnn_encode(model: CnnModel, x):
    """Clean inference pass. Returns ``(fc1, fc2, y)`` where fc1/fc2 are the
    normalized pre-activations of the fully connected layers."""
    flat, _ = model.conv_stack(x)
    y, z = clean_encode(model.fc, flat, mode=EVAL)
    return z[1], z[2] if len(z) > 2 else z[-1], y


class _FlatBatch:
    def __init__(self, features, labels):
        self.features = features
        self.labels = labels


def tau_clean_targets(model: CnnModel, x):
    flat, _ = model.conv_stack(x)
    return clean_targets(model.fc, flat)


def _with_conv(model: CnnModel, batch, inner) -> CostResult:
    x, labels = _batch_parts(batch)
    flat, conv_cache = model.conv_stack(x)
    res = inner(_FlatBatch(flat, labels))
    grads = {f"fc.{k}": v for k, v in res.grads.items()}
    dx, conv_grads = model.conv_backward(res.input_grad, conv_cache)
    grads.update(conv_grads)
    res.grads = grads
    res.input_grad = dx
    return res


def tau_ladder_cost(model: CnnModel, batch, weights: CostWeights, rng: RngStream,
                    update_running: bool = True, frozen_targets=None) -> CostResult:
    """Ladder cost with reconstruction on the two fully connected layers only. The
    conv stack is shared by both paths and receives gradient through the noisy path."""
    return _with_conv(model, batch, lambda b: ladder_cost(
        model.fc, b, weights, rng, update_running=update_running, frozen_targets=frozen_targets))


def cnn_baseline_cost(model: CnnModel, batch, weights: CostWeights, rng: RngStream,
                      update_running: bool = True) -> CostResult:
    return _with_conv(model, batch, lambda b: supervised_only_cost(
        model.fc, b, weights, rng, update_running=update_running))
