"""Acceptance criteria, one test per criterion. Each prints a single PASS/FAIL line
(collected into the pytest terminal summary; also printed when run as a script)."""

import time
from pathlib import Path

import numpy as np
import pytest

from ladder_ser.checkpoint import checkpoint_load, checkpoint_save, digest_of, tensor_digest, to_bytes
from ladder_ser.cnn import (
    CnnConfig,
    CnnModel,
    cnn_baseline_cost,
    maxpool1d_forward,
    tau_clean_targets,
    tau_ladder_cost,
)
from ladder_ser.config import RunConfig
from ladder_ser.data import make_schedule, synth_generate
from ladder_ser.experiments import SEEDS, TASK, semi_supervised_gain
from ladder_ser.gradcheck import numeric_grad, relative_error
from ladder_ser.ladder import (
    MTL,
    CostWeights,
    LadderConfig,
    LadderModel,
    MlpCombinator,
    VanillaCombinator,
    clean_targets,
    ladder_cost,
    supervised_cost,
    supervised_only_cost,
)
from ladder_ser.layers import EVAL, TRAIN, BatchNorm, Dense, Dropout, GaussianNoise, ReLU
from ladder_ser.metrics import ccc, ccc_loss_and_grad, fisher_z_test
from ladder_ser.numerics import RngStream
from ladder_ser.training import evaluate, model_from_checkpoint, train

from conftest import ACCEPTANCE_LINES, ToyBatch, jitter_params, ladder_gradient_errors, randn
from test_ladder import denoising_run
from test_metrics import reference_ccc

DATA_DIR = Path(__file__).parent / "data"

# Frozen from the oracle run of the semi-supervised experiment (10 seeds): STL mean
# test CCC 0.8962, Lad+UL+STL 0.9050, gain 0.0087 with the ladder ahead on 8 seeds.
# The committed margin is half the observed gain, rounded down.
GAIN_MARGIN = 0.004
GAIN_BUDGET_S = 15 * 60
GRADIENT_BUDGET_S = 120


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- 1

def _layer_errors():
    errs = {}
    x, up = randn(10, 8, 16), randn(11, 8, 16)
    kinds = {
        "dense": (lambda: Dense(16, 16, RngStream(0), dtype=np.float64), lambda l, v: l.forward(v)),
        "batchnorm": (lambda: BatchNorm(16, dtype=np.float64), lambda l, v: l.forward(v, TRAIN)),
        "batchnorm_eval": (lambda: BatchNorm(16, dtype=np.float64), lambda l, v: l.forward(v, EVAL)),
        "relu": (ReLU, lambda l, v: l.forward(v)),
        "dropout": (lambda: Dropout(0.3), lambda l, v: l.forward(v, TRAIN, RngStream(1))),
        "noise": (lambda: GaussianNoise(0.5), lambda l, v: l.forward(v, TRAIN, RngStream(1))),
    }
    for name, (make, fwd) in kinds.items():
        layer = make()
        for arr in layer.params.values():
            arr += randn(12, *arr.shape)

        def f():
            return float((fwd(layer, x) * up).sum())

        fwd(layer, x)
        dx, grads = layer.backward(up)
        e = [relative_error(dx, numeric_grad(f, x))]
        e += [relative_error(grads[k], numeric_grad(f, v)) for k, v in layer.params.items()]
        errs[name] = max(e)
    return errs


def _combinator_errors():
    errs = {}
    for name, comb in (("mlp_combinator", MlpCombinator(6, rng=RngStream(0), dtype=np.float64)),
                       ("vanilla_combinator", VanillaCombinator(6, dtype=np.float64))):
        for arr in comb.params.values():
            arr += 0.5 * randn(3, *arr.shape)
        u, zt, up = randn(4, 8, 6), randn(5, 8, 6), randn(6, 8, 6)

        def f():
            return float((comb.fwd(u, zt)[0] * up).sum())

        du, dzt, grads = comb.bwd(up, comb.fwd(u, zt)[1])
        e = [relative_error(du, numeric_grad(f, u)), relative_error(dzt, numeric_grad(f, zt))]
        e += [relative_error(grads[k], numeric_grad(f, v)) for k, v in comb.params.items()]
        errs[name] = max(e)
    return errs


def _ladder_errors():
    errs = {}
    for task, w in (("STL", CostWeights(lambdas=(1.0, 0.5, 2.0))), ("MTL", CostWeights(alpha=0.3, beta=0.3))):
        m = LadderModel(LadderConfig(input_dim=6, hidden=(5, 4), task=task), RngStream(1), np.float64)
        jitter_params(m)
        for lab in (True, False):
            labels = randn(7, 4, 3) if lab else np.full((4, 3), np.nan)
            e = ladder_gradient_errors(m, ToyBatch(randn(3, 4, 6), labels), w, ladder_cost, clean_targets)
            errs[f"ladder_{task}_{'labeled' if lab else 'unlabeled'}"] = max(e.values())
    cnn = CnnModel(CnnConfig(in_channels=4, frames=16, filters=(3, 3), kernels=(3, 2), pools=(2, 2), fc=(5, 4),
                             task=MTL), RngStream(0), np.float64)
    jitter_params(cnn)
    e = ladder_gradient_errors(cnn, ToyBatch(randn(3, 4, 4, 16), randn(4, 4, 3)),
                               CostWeights(lambdas=(0.7, 1.3), alpha=0.5, beta=0.2), tau_ladder_cost, tau_clean_targets)
    errs["tau_ladder_cnn"] = max(e.values())
    return errs


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errs = {}
    errs.update(_layer_errors())
    errs.update(_combinator_errors())
    pred, truth = randn(20, 32), randn(21, 32)
    _, g = ccc_loss_and_grad(pred, truth)
    errs["ccc_loss"] = relative_error(g, numeric_grad(lambda: ccc_loss_and_grad(pred, truth)[0], pred))
    errs.update(_ladder_errors())
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < GRADIENT_BUDGET_S
    report(1, ok, f"{len(errs)} gradient checks, max rel err {errs[worst]:.2e} ({worst}) < 1e-4; "
                  f"{elapsed:.1f}s < {GRADIENT_BUDGET_S}s")


# --------------------------------------------------------------------------- 2

def test_criterion_02_metric_oracles():
    r = RngStream(2)
    worst = 0.0
    for _ in range(1000):
        n = 2 + int(r.uniform(()) * 100)
        x, y = r.normal((n,)), r.normal((n,)) * 1.5 + r.normal(())
        worst = max(worst, abs(ccc(x, y) - reference_ccc(list(x), list(y))))
    y = randn(3, 50)
    self_ccc = ccc(y, y)
    example = ccc([2, 3, 4, 5], [1, 2, 3, 4])
    ok = worst < 1e-12 and abs(self_ccc - 1) < 1e-15 and abs(example - 5 / 7) < 1e-15
    report(2, ok, f"max |ccc - reference| over 1000 pairs {worst:.1e} < 1e-12; "
                  f"ccc(y,y)={self_ccc!r}; worked example {example!r} vs 5/7")


# --------------------------------------------------------------------------- 3

def test_criterion_03_collapse_equivalence():
    worst = 0.0
    for task in ("STL", "MTL"):
        m = LadderModel(LadderConfig(input_dim=6, hidden=(5, 4), task=task, sigma=0.0, input_dropout=0.0,
                                     hidden_dropout=0.0), RngStream(1), np.float64)
        jitter_params(m)
        cnn = CnnModel(CnnConfig(in_channels=4, frames=16, filters=(3, 3), kernels=(3, 2), pools=(2, 2), fc=(5, 4),
                                 task=task, sigma=0.0), RngStream(0), np.float64)
        jitter_params(cnn, prefix="fc.")
        w = CostWeights(lambdas=(0.0,), alpha=0.4, beta=0.4, target=2)
        for seed in range(5):
            b = ToyBatch(randn(seed, 12, 6), randn(seed + 50, 12, 3))
            worst = max(worst, abs(ladder_cost(m, b, w, RngStream(seed), update_running=False).cost
                                   - supervised_only_cost(m, b, w, RngStream(seed), update_running=False).cost))
            b = ToyBatch(randn(seed, 6, 4, 16), randn(seed + 50, 6, 3))
            worst = max(worst, abs(tau_ladder_cost(cnn, b, w, RngStream(seed), update_running=False).cost
                                   - cnn_baseline_cost(cnn, b, w, RngStream(seed), update_running=False).cost))
    report(3, worst < 1e-10, f"sigma=0, lambda=0 ladder vs baseline, dense and CNN, STL and MTL: "
                             f"max |diff| {worst:.1e} < 1e-10")


# --------------------------------------------------------------------------- 4

def test_criterion_04_cost_algebra():
    y, lab = randn(0, 30, 3), randn(1, 30, 3)
    c = [1 - ccc(y[:, k], lab[:, k]) for k in range(3)]
    got = [supervised_cost(y, lab, CostWeights(alpha=a, beta=b), MTL) for a, b in ((1, 0), (0, 1), (0, 0))]
    exact = got == c
    m = LadderModel(LadderConfig(input_dim=6, hidden=(5, 4), task=MTL), RngStream(1), np.float64)
    res = ladder_cost(m, ToyBatch(randn(2, 8, 6), np.full((8, 3), np.nan)), CostWeights(), RngStream(3),
                      update_running=False)
    recon_only = res.supervised == 0.0 and res.cost == res.reconstruction > 0 and not res.grads["head.W"].any()
    report(4, exact and recon_only, f"(1,0)/(0,1)/(0,0) give C_aro/C_val/C_dom exactly: {exact}; "
                                    f"unlabeled batch cost is reconstruction only: {recon_only}")


# --------------------------------------------------------------------------- 5

def test_criterion_05_denoising_sanity():
    start, end = denoising_run(steps=200)
    report(5, end <= 0.5 * start, f"reconstruction cost {start:.4f} -> {end:.4f} after 200 steps "
                                  f"({100 * (1 - end / start):.1f}% reduction, need >= 50%)")


# --------------------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_06_semi_supervised_gain():
    t0 = time.perf_counter()
    res = semi_supervised_gain(SEEDS)
    elapsed = time.perf_counter() - t0
    ok = res.mean_gain > GAIN_MARGIN and elapsed < GAIN_BUDGET_S
    report(6, ok, f"{len(SEEDS)} seeds, {TASK['n_labeled']} labeled / {TASK['n_unlabeled']} unlabeled, d={TASK['d']}: "
                  f"mean test CCC STL {np.mean(res.stl):.4f}, Lad+UL+STL {np.mean(res.ladder):.4f}, "
                  f"gain {res.mean_gain:+.4f} > {GAIN_MARGIN}; {elapsed:.0f}s < {GAIN_BUDGET_S}s")


# --------------------------------------------------------------------------- 7

def test_criterion_07_published_significance():
    aro = fisher_z_test(0.770, 7341, 0.743, 7341)
    val = fisher_z_test(0.301, 7341, 0.312, 7341)
    ok = aro.significant and not val.significant
    report(7, ok, f"arousal 0.770 vs 0.743: Z={aro.statistic:.3f} p={aro.p_value:.2e} significant; "
                  f"valence 0.301 vs 0.312: Z={val.statistic:.3f} p={val.p_value:.3f} not significant")


# --------------------------------------------------------------------------- 8

def test_criterion_08_scheduler_contract():
    ds = synth_generate(100, 1000, 4, 2, seed=0, n_dev=0, n_test=0)
    lab, unl = ds.subset("train"), ds.subset("unlabeled")
    ok, epochs = True, 0
    for policy in ("subsample", "full"):
        rng = RngStream(4)
        for _ in range(3):
            tags = [b.tag for b in make_schedule(lab, unl, 16, mode="UL", epoch_policy=policy, rng=rng)]
            ok &= tags == ["L", "U"] * (len(tags) // 2)
            if policy == "subsample":
                ok &= tags.count("L") == tags.count("U") == 7
            epochs += 1
    report(8, ok, f"{epochs} UL epochs strictly alternate L/U; subsample policy gives equal L and U batch counts")


# --------------------------------------------------------------------------- 9

def test_criterion_09_cnn_shapes():
    cfg = CnnConfig()
    model = CnnModel(cfg, RngStream(0))
    x = randn(1, 2, 65, 1000).astype(np.float32)
    h, lengths = x, []
    for blk in model.blocks:
        h = blk.conv_fwd(h)[0]
        h = maxpool1d_forward(blk.pool, h)
        lengths.append(h.shape[2])
    res = tau_ladder_cost(model, ToyBatch(x, randn(2, 2, 3)), CostWeights(lambdas=(1.0,)), RngStream(3))
    ok = lengths == [500, 250, 125, 62] and sorted(res.per_layer) == [1, 2] and cfg.flatten_width == 7936
    report(9, ok, f"temporal lengths {lengths}, flatten width {cfg.flatten_width}, "
                  f"tau reconstruction terms {sorted(res.per_layer)}")


# --------------------------------------------------------------------------- 10

def test_criterion_10_determinism_and_persistence(tmp_path):
    data = synth_generate(48, 96, 12, 3, seed=3, n_dev=24, n_test=24)
    cfg = RunConfig(variant="Lad+UL+MTL", hidden=(10, 8), lr=1e-3, epochs=2, batch_size=8, seed=5)
    a, b = train(cfg, data).checkpoint, train(cfg, data).checkpoint
    identical = to_bytes(a) == to_bytes(b)

    checkpoint_save(a, tmp_path / "a.ckpt")
    round_trip = np.array_equal(evaluate(a, data).predictions, evaluate(checkpoint_load(tmp_path / "a.ckpt"), data).predictions)

    golden = checkpoint_load(DATA_DIR / "golden.ckpt")
    digests = dict(line.split() for line in (DATA_DIR / "golden.sha256").read_text().splitlines())
    _, model = model_from_checkpoint(golden)
    pred = model.predict(np.load(DATA_DIR / "golden_probe.npy"))
    gap = float(np.abs(pred - np.load(DATA_DIR / "golden_pred.npy")).max())
    golden_ok = digest_of(golden) == digests["file"] and tensor_digest(golden.params) == digests["params"] and gap < 1e-5
    report(10, identical and round_trip and golden_ok,
           f"repeat training bitwise identical: {identical}; save/load predictions bitwise equal: {round_trip}; "
           f"golden checkpoint digests match and predictions within {gap:.1e}: {golden_ok}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
