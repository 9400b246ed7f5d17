"""Ladder network: noisy/clean encoders, lateral decoder, combinators and costs.

Layer indexing follows the encoder: layer 0 is the network input, layers
1..L are the hidden layers. ``z[l]`` is the batch-normalized pre-activation of
the clean pass, ``z_tilde[l]`` the same quantity on the noisy pass (after noise),
``z_hat[l]`` the decoder's reconstruction and ``u[l]`` the normalized top-down
projection fed to the combinator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ladder_ser.errors import DimensionError, ParameterError, ScheduleError, StateError
from ladder_ser.layers import EVAL, TRAIN, BatchNorm, Dense, Dropout, GaussianNoise, ReLU
from ladder_ser.metrics import ccc_loss_and_grad
from ladder_ser.numerics import RngStream

STL = "STL"
MTL = "MTL"
ATTRIBUTES = ("arousal", "valence", "dominance")


# --------------------------------------------------------------------------- combinators


class MlpCombinator:
    """Per-unit MLP over ``[u, z_tilde, u * z_tilde]`` with one ReLU hidden layer.

    Initialized so that the output equals ``z_tilde``: hidden units 0 and 1 carry
    ``relu(z_tilde)`` and ``relu(-z_tilde)`` with output weights +1 and -1; the
    remaining units get small random input weights and zero output weights.
    """

    kind = "mlp"

    def __init__(self, width: int, hidden: int = 4, rng: Optional[RngStream] = None, dtype=np.float32):
        if hidden < 2:
            raise ParameterError("combinator hidden width must be at least 2")
        w1 = np.zeros((width, hidden, 3))
        w1[:, 0, 1] = 1.0
        w1[:, 1, 1] = -1.0
        if rng is not None and hidden > 2:
            w1[:, 2:, :] = 0.1 * rng.normal((width, hidden - 2, 3))
        w2 = np.zeros((width, hidden))
        w2[:, 0] = 1.0
        w2[:, 1] = -1.0
        self.params = {
            "W1": w1.astype(dtype),
            "b1": np.zeros((width, hidden), dtype=dtype),
            "W2": w2.astype(dtype),
            "b2": np.zeros(width, dtype=dtype),
        }

    def fwd(self, u, zt):
        if u.shape != zt.shape:
            raise DimensionError(f"combinator inputs differ in shape: {u.shape} vs {zt.shape}")
        p = self.params
        w1 = p["W1"]
        uz = u * zt
        # (B, w, hidden); the input dimension (3) is unrolled
        pre = u[..., None] * w1[:, :, 0] + zt[..., None] * w1[:, :, 1] + uz[..., None] * w1[:, :, 2] + p["b1"]
        hid = np.maximum(pre, 0)
        out = (hid * p["W2"]).sum(axis=-1) + p["b2"]
        return out, (u, zt, uz, pre, hid)

    def bwd(self, grad, cache):
        u, zt, uz, pre, hid = cache
        p = self.params
        w1 = p["W1"]
        g = grad[..., None]
        dpre = g * p["W2"] * (pre > 0)
        grads = {
            "W2": (g * hid).sum(axis=0),
            "b2": grad.sum(axis=0),
            "W1": np.stack([(dpre * x[..., None]).sum(axis=0) for x in (u, zt, uz)], axis=-1),
            "b1": dpre.sum(axis=0),
        }
        d_u = (dpre * w1[:, :, 0]).sum(axis=-1)
        d_zt = (dpre * w1[:, :, 1]).sum(axis=-1)
        d_uz = (dpre * w1[:, :, 2]).sum(axis=-1)
        return d_u + d_uz * zt, d_zt + d_uz * u, grads


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class VanillaCombinator:
    """Ten-parameter per-unit combinator of the original ladder formulation.

    ``mu = a1 sig(a2 u + a3) + a4 u + a5``, ``v = a6 sig(a7 u + a8) + a9 u + a10``,
    ``z_hat = (z_tilde - mu) v + mu``. Initialized to the identity on ``z_tilde``.
    """

    kind = "vanilla"

    def __init__(self, width: int, rng: Optional[RngStream] = None, dtype=np.float32):
        init = {2: 1.0, 7: 1.0, 10: 1.0}
        self.params = {f"a{i}": np.full(width, init.get(i, 0.0), dtype=dtype) for i in range(1, 11)}

    def fwd(self, u, zt):
        if u.shape != zt.shape:
            raise DimensionError(f"combinator inputs differ in shape: {u.shape} vs {zt.shape}")
        a = self.params
        s1 = _sigmoid(a["a2"] * u + a["a3"])
        s2 = _sigmoid(a["a7"] * u + a["a8"])
        mu = a["a1"] * s1 + a["a4"] * u + a["a5"]
        v = a["a6"] * s2 + a["a9"] * u + a["a10"]
        return (zt - mu) * v + mu, (u, zt, s1, s2, mu, v)

    def bwd(self, grad, cache):
        u, zt, s1, s2, mu, v = cache
        a = self.params
        dmu = grad * (1 - v)
        dv = grad * (zt - mu)
        d1 = dmu * a["a1"] * s1 * (1 - s1)
        d2 = dv * a["a6"] * s2 * (1 - s2)
        grads = {
            "a1": (dmu * s1).sum(0), "a2": (d1 * u).sum(0), "a3": d1.sum(0),
            "a4": (dmu * u).sum(0), "a5": dmu.sum(0),
            "a6": (dv * s2).sum(0), "a7": (d2 * u).sum(0), "a8": d2.sum(0),
            "a9": (dv * u).sum(0), "a10": dv.sum(0),
        }
        du = d1 * a["a2"] + dmu * a["a4"] + d2 * a["a7"] + dv * a["a9"]
        return du, grad * v, grads


def combinator_apply(combinator, u, z_tilde):
    return combinator.fwd(u, z_tilde)[0]


# --------------------------------------------------------------------------- model


@dataclass
class CostWeights:
    lambdas: Sequence[float] = (1.0, 1.0, 1.0)
    alpha: float = 1.0
    beta: float = 0.0
    target: int = 0

    def __post_init__(self):
        if any(lam < 0 for lam in self.lambdas):
            raise ParameterError("reconstruction weights must be non-negative")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1) or self.alpha + self.beta > 1 + 1e-12:
            raise ParameterError(f"need alpha, beta in [0, 1] with alpha + beta <= 1, got {self.alpha}, {self.beta}")
        if self.target not in (0, 1, 2):
            raise ParameterError("target attribute index must be 0, 1 or 2")

    @property
    def attribute_weights(self) -> Tuple[float, float, float]:
        return self.alpha, self.beta, 1.0 - self.alpha - self.beta


@dataclass
class LadderConfig:
    input_dim: int
    hidden: Tuple[int, ...] = (256, 256)
    task: str = STL
    sigma: float = math.sqrt(0.3)
    input_dropout: float = 0.1
    hidden_dropout: float = 0.0
    reconstruct_input: bool = True
    combinator: str = "mlp"
    combinator_hidden: int = 4
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.99

    @property
    def n_outputs(self) -> int:
        return 3 if self.task == MTL else 1

    @property
    def widths(self) -> List[int]:
        return [self.input_dim, *self.hidden]


@dataclass
class LadderActivations:
    z: List[np.ndarray]
    z_tilde: List[np.ndarray]
    z_hat: Dict[int, np.ndarray] = field(default_factory=dict)
    u: Dict[int, np.ndarray] = field(default_factory=dict)
    y_noisy: Optional[np.ndarray] = None
    y_clean: Optional[np.ndarray] = None


class LadderModel:
    """Encoder (dense -> batch norm -> noise -> scale/bias -> ReLU per layer), linear
    head(s) on the top pre-activation, and a mirrored decoder with one combinator
    per reconstructed layer."""

    def __init__(self, config: LadderConfig, rng: RngStream, dtype=np.float32):
        if config.task not in (STL, MTL):
            raise ParameterError(f"task must be STL or MTL, got {config.task!r}")
        if not config.hidden:
            raise ParameterError("at least one hidden layer is required")
        self.config = config
        self.dtype = np.dtype(dtype)
        widths = config.widths
        self.n_layers = L = len(config.hidden)
        eps, mom = config.bn_epsilon, config.bn_momentum

        self.enc_dense = [None] + [Dense(widths[l - 1], widths[l], rng, bias=False, dtype=dtype) for l in range(1, L + 1)]
        # the top layer feeds the linear head directly, so it carries no scale/bias
        self.enc_bn = [None] + [
            BatchNorm(widths[l], eps, mom, dtype=dtype, affine=l < L) for l in range(1, L + 1)
        ]
        self.relu = ReLU()
        self.input_dropout = Dropout(config.input_dropout)
        self.hidden_dropout = Dropout(config.hidden_dropout)
        self.noise = GaussianNoise(config.sigma)
        self.head = Dense(widths[L], config.n_outputs, rng, bias=True, dtype=dtype)
        self.head.params["W"] *= self.dtype.type(math.sqrt(0.5))

        self.recon_layers = list(range(0 if config.reconstruct_input else 1, L + 1))
        self.dec_dense: Dict[int, Dense] = {}
        self.dec_bn: Dict[int, BatchNorm] = {}
        self.combinators: Dict[int, object] = {}
        for l in self.recon_layers:
            src = widths[L] if l == L else widths[l + 1]
            self.dec_dense[l] = Dense(src, widths[l], rng, bias=False, dtype=dtype)
            self.dec_bn[l] = BatchNorm(widths[l], eps, mom, dtype=dtype, affine=False)
            if config.combinator == "mlp":
                self.combinators[l] = MlpCombinator(widths[l], config.combinator_hidden, rng, dtype)
            elif config.combinator == "vanilla":
                self.combinators[l] = VanillaCombinator(widths[l], dtype=dtype)
            else:
                raise ParameterError(f"unknown combinator {config.combinator!r}")

    # named views --------------------------------------------------------------------

    def _param_owners(self):
        L = self.n_layers
        for l in range(1, L + 1):
            yield f"enc{l}", self.enc_dense[l]
            yield f"bn{l}", self.enc_bn[l]
        yield "head", self.head
        for l in self.recon_layers:
            yield f"dec{l}", self.dec_dense[l]
            yield f"comb{l}", self.combinators[l]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for prefix, owner in self._param_owners() for k, v in owner.params.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for l in range(1, self.n_layers + 1):
            out[f"bn{l}.running_mean"] = self.enc_bn[l].running_mean
            out[f"bn{l}.running_var"] = self.enc_bn[l].running_var
        return out

    def set_buffers(self, values: Dict[str, np.ndarray]) -> None:
        for l in range(1, self.n_layers + 1):
            self.enc_bn[l].running_mean = np.array(values[f"bn{l}.running_mean"], dtype=self.dtype)
            self.enc_bn[l].running_var = np.array(values[f"bn{l}.running_var"], dtype=self.dtype)

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise StateError(f"missing parameters: {sorted(missing)}")
        for name, arr in params.items():
            src = np.asarray(values[name])
            if src.shape != arr.shape:
                raise DimensionError(f"parameter {name}: shape {src.shape} != {arr.shape}")
            np.copyto(arr, src.astype(arr.dtype))

    def predict(self, x) -> np.ndarray:
        return clean_encode(self, x, mode=EVAL)[0]


def _as_input(model: LadderModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DimensionError(f"expected input of width {model.config.input_dim}, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------- passes


def noisy_encode(model: LadderModel, x, rng: Optional[RngStream], mode: str = TRAIN,
                 update_running: bool = False):
    """Corrupted forward pass. Returns ``(y_noisy, z_tilde, caches)``."""
    x = _as_input(model, x)
    L = model.n_layers
    caches = {}
    h, caches["drop0"] = model.input_dropout.fwd(x, mode, rng)
    h, _ = model.noise.fwd(h, mode, rng)
    z_tilde = [h]
    for l in range(1, L + 1):
        if l > 1:
            h, caches[f"drop{l}"] = model.hidden_dropout.fwd(h, mode, rng)
        a, caches[f"dense{l}"] = model.enc_dense[l].fwd(h)
        n, caches[f"norm{l}"] = model.enc_bn[l].normalize_fwd(a, mode, update_running=update_running)
        zt, _ = model.noise.fwd(n, mode, rng)
        z_tilde.append(zt)
        if l < L:
            s, caches[f"affine{l}"] = model.enc_bn[l].affine_fwd(zt)
            h, caches[f"relu{l}"] = model.relu.fwd(s)
    y, caches["head"] = model.head.fwd(z_tilde[L])
    return y, z_tilde, caches


def clean_encode(model: LadderModel, x, mode: str = EVAL, update_running: bool = False):
    """Noise- and dropout-free pass. Train mode normalizes with the batch's own
    statistics (reconstruction targets), eval mode with the running statistics."""
    x = _as_input(model, x)
    L = model.n_layers
    h = x
    z = [x]
    for l in range(1, L + 1):
        a, _ = model.enc_dense[l].fwd(h)
        zl, _ = model.enc_bn[l].normalize_fwd(a, mode, update_running=update_running and mode == TRAIN)
        z.append(zl)
        if l < L:
            s, _ = model.enc_bn[l].affine_fwd(zl)
            h = np.maximum(s, 0)
    y, _ = model.head.fwd(z[L])
    return y, z


def encoder_backward(model: LadderModel, caches, dy, dz_tilde: Dict[int, np.ndarray]):
    """Backpropagate through the noisy encoder. ``dz_tilde`` holds extra gradient
    arriving at each ``z_tilde[l]`` from the decoder. Returns ``(dx, grads)``."""
    L = model.n_layers
    grads = {}
    dh_top, g = model.head.bwd(dy, caches["head"])
    grads.update({f"head.{k}": v for k, v in g.items()})
    dzt = dh_top
    if L in dz_tilde:
        dzt = dzt + dz_tilde[L]
    dh = None
    for l in range(L, 0, -1):
        if l < L:
            ds, _ = model.relu.bwd(dh, caches[f"relu{l}"])
            dzt, g = model.enc_bn[l].affine_bwd(ds, caches[f"affine{l}"])
            grads.update({f"bn{l}.{k}": v for k, v in g.items()})
            if l in dz_tilde:
                dzt = dzt + dz_tilde[l]
        da = model.enc_bn[l].normalize_bwd(dzt, caches[f"norm{l}"])
        dh, g = model.enc_dense[l].bwd(da, caches[f"dense{l}"])
        grads.update({f"enc{l}.{k}": v for k, v in g.items()})
        if l > 1:
            dh, _ = model.hidden_dropout.bwd(dh, caches[f"drop{l}"])
    if 0 in dz_tilde:
        dh = dh + dz_tilde[0]
    dx, _ = model.input_dropout.bwd(dh, caches["drop0"])
    return dx, grads


def decode(model: LadderModel, z_tilde: Optional[List[np.ndarray]]):
    """Top-down pass seeded from the noisy top layer. Returns ``(z_hat, u, caches)``
    keyed by layer index."""
    if z_tilde is None:
        raise StateError("decode needs the activations of a noisy forward pass")
    L = model.n_layers
    if len(z_tilde) != L + 1:
        raise DimensionError(f"expected {L + 1} noisy layers, got {len(z_tilde)}")
    z_hat, u, caches = {}, {}, {}
    for l in sorted(model.recon_layers, reverse=True):
        src = z_tilde[L] if l == L else z_hat[l + 1]
        proj, c_dense = model.dec_dense[l].fwd(src)
        u[l], c_norm = model.dec_bn[l].normalize_fwd(proj, TRAIN, update_running=False)
        z_hat[l], c_comb = model.combinators[l].fwd(u[l], z_tilde[l])
        caches[l] = (c_dense, c_norm, c_comb)
    return z_hat, u, caches


def decoder_backward(model: LadderModel, caches, dz_hat: Dict[int, np.ndarray]):
    """Returns gradient arriving at each ``z_tilde[l]`` and the decoder parameter grads."""
    L = model.n_layers
    grads = {}
    dz_tilde: Dict[int, np.ndarray] = {}
    carry: Dict[int, np.ndarray] = {}
    for l in sorted(model.recon_layers):
        c_dense, c_norm, c_comb = caches[l]
        g_hat = dz_hat[l] + carry.pop(l, 0)
        du, dzt, g = model.combinators[l].bwd(g_hat, c_comb)
        grads.update({f"comb{l}.{k}": v for k, v in g.items()})
        dz_tilde[l] = dzt
        dproj = model.dec_bn[l].normalize_bwd(du, c_norm)
        dsrc, g = model.dec_dense[l].bwd(dproj, c_dense)
        grads.update({f"dec{l}.{k}": v for k, v in g.items()})
        if l == L:
            dz_tilde[L] = dz_tilde[L] + dsrc
        else:
            carry[l + 1] = dsrc
    return dz_tilde, grads


# --------------------------------------------------------------------------- costs


def target_stats(z: List[np.ndarray], layers: Sequence[int], epsilon: float):
    """Per-layer (mean, std) of the clean targets used to normalize reconstructions.
    The input layer (0) is compared raw."""
    stats = {}
    for l in layers:
        if l == 0:
            stats[l] = None
        else:
            stats[l] = (z[l].mean(axis=0), np.sqrt(z[l].var(axis=0) + z[l].dtype.type(epsilon)))
    return stats


def _lambda_for(weights: CostWeights, l: int, layers: Sequence[int]) -> float:
    lams = list(weights.lambdas)
    if len(lams) == 1:
        return float(lams[0])
    if len(lams) == len(layers):
        return float(lams[list(layers).index(l)])
    raise DimensionError(f"{len(lams)} reconstruction weights for {len(layers)} reconstructed layers")


def reconstruction_cost(z_hat, z, weights: CostWeights, stats=None, layers=None, with_grad: bool = False):
    """Weighted sum of per-layer MSEs between (normalized) reconstructions and clean targets.

    ``z_hat`` and ``z`` are dicts or lists indexed by layer; ``stats`` optionally maps a
    layer to the ``(mean, std)`` used to normalize ``z_hat`` before comparison.
    """
    if layers is None:
        if isinstance(z_hat, dict):
            layers = sorted(z_hat)
        else:
            if len(z_hat) != len(z):
                raise DimensionError(f"{len(z_hat)} reconstructions for {len(z)} target layers")
            layers = list(range(len(z_hat)))
    total = 0.0
    per_layer = {}
    dz_hat = {}
    for l in layers:
        if z_hat[l].shape != z[l].shape:
            raise DimensionError(f"layer {l}: reconstruction {z_hat[l].shape} vs target {z[l].shape}")
        st = None if stats is None else stats.get(l)
        zn = z_hat[l] if st is None else (z_hat[l] - st[0]) / st[1]
        diff = zn - z[l]
        cost = float(np.mean(diff * diff))
        lam = _lambda_for(weights, l, layers)
        per_layer[l] = cost
        total += lam * cost
        if with_grad:
            g = diff * z[l].dtype.type(2.0 * lam / diff.size)
            dz_hat[l] = g if st is None else g / st[1]
    if with_grad:
        return total, per_layer, dz_hat
    return total


def supervised_cost(y, labels, weights: CostWeights, mode: str = STL, with_grad: bool = False):
    """``1 - CCC`` on the target attribute (STL) or the alpha/beta-weighted sum over
    the three attribute heads (MTL). ``labels`` has one column per attribute."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] != y.shape[0]:
        raise DimensionError("labels and predictions disagree on batch size")
    if np.isnan(labels).any():
        raise ScheduleError("supervised cost requires labels for every sample in the batch")
    dy = np.zeros_like(y)
    if mode == STL:
        col = weights.target if labels.shape[1] == 3 else 0
        cost, g = ccc_loss_and_grad(y[:, 0], labels[:, col])
        dy[:, 0] = g
    elif mode == MTL:
        if y.shape[1] != 3 or labels.shape[1] != 3:
            raise DimensionError("MTL needs three heads and three label columns")
        cost = 0.0
        for k, w in enumerate(weights.attribute_weights):
            if w == 0:
                continue
            c, g = ccc_loss_and_grad(y[:, k], labels[:, k])
            cost += w * c
            dy[:, k] = w * g
    else:
        raise ParameterError(f"unknown task mode {mode!r}")
    return (cost, dy) if with_grad else cost


def _batch_parts(batch):
    x = batch.features
    labels = batch.labels
    if labels is not None:
        labels = np.asarray(labels)
        missing = np.isnan(labels).any(axis=tuple(range(1, labels.ndim)))
        if missing.all():
            labels = None
        elif missing.any():
            raise ScheduleError("mixed labeled/unlabeled batch")
    return x, labels


@dataclass
class CostResult:
    cost: float
    grads: Dict[str, np.ndarray]
    supervised: float = 0.0
    reconstruction: float = 0.0
    per_layer: Dict[int, float] = field(default_factory=dict)
    activations: Optional[LadderActivations] = None
    input_grad: Optional[np.ndarray] = None


def clean_targets(model: LadderModel, x, update_running: bool = False):
    """Clean train-mode pass producing ``(y_clean, z)``; ``z`` are the reconstruction targets."""
    return clean_encode(model, x, mode=TRAIN, update_running=update_running)


def ladder_cost(model: LadderModel, batch, weights: CostWeights, rng: RngStream,
                update_running: bool = True, frozen_targets=None) -> CostResult:
    """Supervised cost (labeled batches only) plus weighted reconstruction cost, with
    gradients for every trainable parameter.

    Clean-path targets are constants: no gradient flows through them. Passing
    ``frozen_targets`` (the output of :func:`clean_targets`) reuses them instead of
    recomputing, which is what a finite-difference check of these gradients needs.
    """
    x, labels = _batch_parts(batch)
    cfg = model.config
    if frozen_targets is None:
        # also drives the running batch-norm statistics
        y_clean, z = clean_targets(model, x, update_running=update_running)
    else:
        y_clean, z = frozen_targets
    y, z_tilde, enc_caches = noisy_encode(model, x, rng, mode=TRAIN)
    z_hat, u, dec_caches = decode(model, z_tilde)

    stats = target_stats(z, model.recon_layers, cfg.bn_epsilon)
    rec, per_layer, dz_hat = reconstruction_cost(z_hat, z, weights, stats, model.recon_layers, with_grad=True)
    if labels is not None:
        sup, dy = supervised_cost(y, labels, weights, cfg.task, with_grad=True)
    else:
        sup, dy = 0.0, np.zeros_like(y)

    dz_tilde, grads = decoder_backward(model, dec_caches, dz_hat)
    dx, enc_grads = encoder_backward(model, enc_caches, dy, dz_tilde)
    grads.update(enc_grads)
    acts = LadderActivations(z=z, z_tilde=z_tilde, z_hat=z_hat, u=u, y_noisy=y, y_clean=y_clean)
    return CostResult(cost=sup + rec, grads=grads, supervised=sup, reconstruction=rec,
                      per_layer=per_layer, activations=acts, input_grad=dx)


def supervised_only_cost(model: LadderModel, batch, weights: CostWeights, rng: RngStream,
                         update_running: bool = True) -> CostResult:
    """Plain STL/MTL regressor cost: one forward pass with the configured noise and
    dropout, no decoder. Used for the baseline systems."""
    x, labels = _batch_parts(batch)
    if labels is None:
        raise ScheduleError("baseline systems train on labeled batches only")
    y, z_tilde, caches = noisy_encode(model, x, rng, mode=TRAIN, update_running=update_running)
    sup, dy = supervised_cost(y, labels, weights, model.config.task, with_grad=True)
    dx, grads = encoder_backward(model, caches, dy, {})
    acts = LadderActivations(z=[], z_tilde=z_tilde, y_noisy=y)
    return CostResult(cost=sup, grads=grads, supervised=sup, activations=acts, input_grad=dx)
