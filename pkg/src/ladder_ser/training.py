"""Training loop with best-dev selection, evaluation, system comparison and the MTL grid search."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from ladder_ser.checkpoint import Checkpoint
from ladder_ser.cnn import CnnConfig, CnnModel, cnn_baseline_cost, tau_ladder_cost
from ladder_ser.config import TARGETS, RunConfig
from ladder_ser.data import (
    FRAME,
    SENTENCE,
    DataSet,
    NormStats,
    affine_label_map,
    apply_znorm,
    attach_labels,
    fit_znorm,
    invert_labels,
    load_features,
    load_labels,
    make_schedule,
)
from ladder_ser.errors import DegenerateTestError, DimensionError, DivergenceError, ParameterError
from ladder_ser.ladder import CostWeights, LadderConfig, LadderModel, ladder_cost, supervised_only_cost
from ladder_ser.metrics import MetricValue, SignificanceResult, fisher_z_test, metric_value, paired_t_test
from ladder_ser.numerics import RngStream
from ladder_ser.optimizer import Nadam

log = logging.getLogger(__name__)

FEATURE_DIMS = {"cnn-LLD": 65, "cnn-MFB": 40}


# --------------------------------------------------------------------------- model construction


def build_model(cfg: RunConfig, input_dim: int, rng: RngStream):
    if cfg.model == "dense-HLD":
        return LadderModel(
            LadderConfig(
                input_dim=input_dim,
                hidden=tuple(cfg.hidden),
                task=cfg.task,
                sigma=cfg.sigma,
                input_dropout=cfg.input_dropout,
                hidden_dropout=cfg.hidden_dropout,
                combinator=cfg.combinator,
            ),
            rng,
        )
    return CnnModel(
        CnnConfig(
            in_channels=input_dim,
            frames=cfg.frames,
            fc=tuple(cfg.hidden),
            task=cfg.task,
            sigma=cfg.sigma,
            dropout=0.0,
            combinator=cfg.combinator,
        ),
        rng,
    )


def cost_function(cfg: RunConfig) -> Callable:
    dense = cfg.model == "dense-HLD"
    if cfg.is_ladder:
        return ladder_cost if dense else tau_ladder_cost
    return supervised_only_cost if dense else cnn_baseline_cost


def cost_weights(cfg: RunConfig, n_recon: int) -> CostWeights:
    alpha, beta = cfg.effective_weights
    lam = cfg.lambda_l if cfg.is_ladder else 0.0
    return CostWeights(lambdas=[lam] * n_recon, alpha=alpha, beta=beta, target=cfg.target_index)


def _recon_count(model) -> int:
    return len(model.recon_layers) if hasattr(model, "recon_layers") else len(model.fc.recon_layers)


# --------------------------------------------------------------------------- data


def load_dataset(cfg: RunConfig) -> DataSet:
    kind = SENTENCE if cfg.model == "dense-HLD" else FRAME
    dim = FEATURE_DIMS.get(cfg.model)
    fmt = cfg.feature_format or None
    ds = load_features(cfg.features, fmt=fmt, kind=kind, dim=dim)
    if cfg.labels:
        ds = attach_labels(ds, load_labels(cfg.labels))
    if cfg.unlabeled_features:
        extra = load_features(cfg.unlabeled_features, fmt=fmt, kind=kind, dim=dim)
        ds = concat(ds, extra)
    return ds


def concat(a: DataSet, b: DataSet) -> DataSet:
    if a.kind != b.kind or (len(a) and len(b) and a.dim != b.dim):
        raise DimensionError("cannot concatenate datasets of different kinds or widths")
    feats = np.concatenate([a.features, b.features]) if a.kind == SENTENCE else list(a.features) + list(b.features)
    return DataSet(
        kind=a.kind,
        ids=a.ids + b.ids,
        features=feats,
        labels=np.concatenate([a.labels, b.labels]),
        split=np.concatenate([a.split, b.split]),
    )


def model_inputs(cfg: RunConfig, ds: DataSet) -> np.ndarray:
    return ds.feature_tensor(cfg.frames if ds.kind == FRAME else None)


def predict_raw(model, cfg: RunConfig, x: np.ndarray, stats: NormStats, batch: int = 1024) -> np.ndarray:
    """Predictions in raw label space, shape (n, 3); attributes without a head are NaN."""
    outs = [model.predict(x[i:i + batch]) for i in range(0, len(x), batch)]
    y = np.concatenate(outs) if outs else np.zeros((0, 3 if cfg.is_mtl else 1))
    y = y.astype(np.float64)
    full = np.full((len(y), 3), np.nan)
    if cfg.is_mtl:
        full[:] = y
    else:
        full[:, cfg.target_index] = y[:, 0]
    return invert_labels(full, stats)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[dict]
    model: object = None


def _dev_scores(model, cfg, x_dev, y_dev_raw, stats) -> Dict[str, float]:
    if len(x_dev) < 2:
        return {}
    pred = predict_raw(model, cfg, x_dev, stats)
    scores = {}
    for k, attr in enumerate(TARGETS):
        if not np.isnan(pred[:, k]).any():
            scores[attr] = metric_value(pred[:, k], y_dev_raw[:, k]).ccc
    return scores


def _snapshot(model, opt: Nadam) -> dict:
    return {
        "params": {k: v.copy() for k, v in model.parameters().items()},
        "buffers": {k: v.copy() for k, v in model.buffers().items()},
        "opt_m": {k: v.copy() for k, v in opt.state.m.items()},
        "opt_n": {k: v.copy() for k, v in opt.state.n.items()},
        "opt_t": opt.state.t,
    }


def _to_checkpoint(cfg: RunConfig, snap: dict, stats: NormStats, meta: dict) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        params=snap["params"],
        buffers=snap["buffers"],
        opt_m=snap["opt_m"],
        opt_n=snap["opt_n"],
        opt_t=snap["opt_t"],
        norm=stats.to_dict(),
        meta=meta,
    )


def train(cfg: RunConfig, data: Optional[DataSet] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train one system and keep the epoch with the best dev CCC on the target attribute.

    Epoch 0 (the initialized model) is part of the log and eligible for selection.
    A non-finite cost raises :class:`DivergenceError` whose ``checkpoint`` attribute
    holds the best checkpoint reached so far.
    """
    if data is None:
        data = load_dataset(cfg)
    train_raw = data.subset("train")
    stats = fit_znorm(train_raw)
    norm = apply_znorm(data, stats)
    tr = norm.subset("train")
    dev = norm.subset("dev")
    unl = norm.subset("unlabeled") if cfg.uses_unlabeled else None
    if cfg.uses_unlabeled and (unl is None or len(unl) == 0):
        raise ParameterError(f"variant {cfg.variant} needs unlabeled data")
    if len(tr) < 2:
        raise ParameterError("need at least two labeled training samples")

    root = RngStream(cfg.seed)
    init_rng, sched_rng, noise_rng = root.fork(1), root.fork(2), root.fork(3)
    input_dim = int(stats.keep.sum())
    model = build_model(cfg, input_dim, init_rng)
    cost_fn = cost_function(cfg)
    weights = cost_weights(cfg, _recon_count(model))
    opt = Nadam(lr=cfg.lr)
    params = model.parameters()

    x_dev = model_inputs(cfg, dev)
    y_dev_raw = invert_labels(dev.labels, stats)
    target = cfg.target

    history: List[dict] = []
    meta_base = {
        "input_dim": input_dim,
        "dropped_features": stats.dropped,
        "target": target,
    }

    def record(epoch, train_cost):
        scores = _dev_scores(model, cfg, x_dev, y_dev_raw, stats)
        entry = {"epoch": epoch, "train_cost": train_cost, "dev_ccc": scores}
        history.append(entry)
        log.info("epoch %d train_cost %s dev_ccc %s", epoch, _fmt(train_cost), {k: round(v, 4) for k, v in scores.items()})
        if on_epoch:
            on_epoch(entry)
        return scores.get(target, -math.inf)

    best_score = record(0, None)
    best = _snapshot(model, opt)
    best_epoch = 0

    def make_ckpt():
        best_dev = history[best_epoch]["dev_ccc"].get(target)
        meta = dict(meta_base, best_epoch=best_epoch, best_dev_ccc=best_dev, history=history)
        return _to_checkpoint(cfg, best, stats, meta)

    mode = "UL" if cfg.uses_unlabeled else "L"
    for epoch in range(1, cfg.epochs + 1):
        batches = make_schedule(tr, unl, cfg.batch_size, mode, cfg.unlabeled_policy, sched_rng, frames=cfg.frames)
        total, count = 0.0, 0
        for batch in batches:
            res = cost_fn(model, batch, weights, noise_rng)
            if not math.isfinite(res.cost):
                err = DivergenceError(f"non-finite cost at epoch {epoch}; keeping epoch {best_epoch}")
                err.checkpoint = make_ckpt()
                raise err
            try:
                opt.step(params, res.grads)
            except DivergenceError as exc:
                exc.checkpoint = make_ckpt()
                raise
            total += res.cost
            count += 1
        score = record(epoch, total / max(count, 1))
        if score > best_score:
            best_score, best_epoch = score, epoch
            best = _snapshot(model, opt)

    return TrainResult(checkpoint=make_ckpt(), history=history, model=model)


def _fmt(v):
    return "-" if v is None else f"{v:.5f}"


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = RunConfig.from_dict(ckpt.config)
    model = build_model(cfg, int(ckpt.meta["input_dim"]), RngStream(0))
    model.load_parameters(ckpt.params)
    model.set_buffers(ckpt.buffers)
    return cfg, model


def restore_optimizer(ckpt: Checkpoint) -> Nadam:
    cfg = RunConfig.from_dict(ckpt.config)
    opt = Nadam(lr=cfg.lr)
    opt.state.t = ckpt.opt_t
    opt.state.m = {k: v.copy() for k, v in ckpt.opt_m.items()}
    opt.state.n = {k: v.copy() for k, v in ckpt.opt_n.items()}
    return opt


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    metrics: Dict[str, MetricValue]
    folds: Dict[str, List[float]] = field(default_factory=dict)
    predictions: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return next(iter(self.metrics.values())).n if self.metrics else 0


LabelMap = Tuple[float, float, float, float]


def evaluate(ckpt: Checkpoint, dataset: DataSet, label_map: Optional[LabelMap] = None,
             split: Optional[str] = "test", n_folds: Optional[int] = None) -> EvalReport:
    """Clean-encoder inference on the labeled samples of ``split`` (all labeled
    samples when ``split`` is None). ``label_map`` = (src_lo, src_hi, dst_lo, dst_hi)
    maps training-scale predictions onto the evaluation corpus's scale before scoring."""
    cfg, model = model_from_checkpoint(ckpt)
    expected = SENTENCE if cfg.model == "dense-HLD" else FRAME
    if dataset.kind != expected:
        raise DimensionError(f"checkpoint expects {expected}-level features, got {dataset.kind}")
    ds = dataset.subset(split) if split else dataset
    ds = ds.take(np.flatnonzero(ds.labeled))
    stats = NormStats.from_dict(ckpt.norm)
    norm = apply_znorm(ds, stats)
    pred = predict_raw(model, cfg, model_inputs(cfg, norm), stats)
    if label_map is not None:
        pred = affine_label_map(pred, *label_map)
    truth = ds.labels
    metrics, folds = {}, {}
    for k, attr in enumerate(TARGETS):
        if np.isnan(pred[:, k]).any():
            continue
        metrics[attr] = metric_value(pred[:, k], truth[:, k])
        if n_folds:
            parts = np.array_split(np.arange(len(ds)), n_folds)
            folds[attr] = [metric_value(pred[p, k], truth[p, k]).ccc for p in parts]
    return EvalReport(metrics=metrics, folds=folds, predictions=pred)


def compare(report_a: EvalReport, report_b: EvalReport, test: str = "fisher"
            ) -> Dict[str, Union[SignificanceResult, DegenerateTestError]]:
    """Per-attribute one-tailed test that system A beats system B. Degenerate
    paired tests are returned as the error object rather than raised."""
    out = {}
    for attr in TARGETS:
        if attr not in report_a.metrics or attr not in report_b.metrics:
            continue
        a, b = report_a.metrics[attr], report_b.metrics[attr]
        if test == "fisher":
            if a.n != b.n:
                raise DimensionError(f"{attr}: Fisher comparison needs equal sample counts ({a.n} vs {b.n})")
            out[attr] = fisher_z_test(a.ccc, a.n, b.ccc, b.n)
        elif test == "paired_t":
            fa, fb = report_a.folds.get(attr), report_b.folds.get(attr)
            if not fa or not fb or len(fa) != len(fb):
                raise DimensionError(f"{attr}: paired t-test needs matching per-fold results")
            try:
                out[attr] = paired_t_test(fa, fb)
            except DegenerateTestError as exc:
                out[attr] = exc
        else:
            raise ParameterError(f"unknown test {test!r}")
    return out


def render_comparison(report_a: EvalReport, report_b: EvalReport, results, names=("A", "B")) -> str:
    rows = [("attribute", f"{names[0]} ccc", f"{names[1]} ccc", "statistic", "p-value", "")]
    for attr, res in results.items():
        a, b = report_a.metrics[attr].ccc, report_b.metrics[attr].ccc
        if isinstance(res, Exception):
            rows.append((attr, f"{a:.3f}", f"{b:.3f}", "-", "-", f"degenerate: {res}"))
        else:
            rows.append((attr, f"{a:.3f}", f"{b:.3f}", f"{res.statistic:.3f}", f"{res.p_value:.4g}",
                         "*" if res.significant else ""))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("* one-tailed p < 0.05 in favour of " + names[0])
    return "\n".join(lines)


def render_report(report: EvalReport) -> str:
    rows = [("attribute", "ccc", "pearson", "n", "fold ccc")]
    for attr, m in report.metrics.items():
        folds = report.folds.get(attr)
        fold_txt = f"{np.mean(folds):.3f} +/- {np.std(folds):.3f}" if folds else ""
        rows.append((attr, f"{m.ccc:.4f}", f"{m.pearson:.4f}", str(m.n), fold_txt))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attribute", "ccc", "pearson", "n", "fold_ccc"])
        for attr, m in report.metrics.items():
            folds = ";".join(repr(v) for v in report.folds.get(attr, []))
            w.writerow([attr, repr(m.ccc), repr(m.pearson), m.n, folds])


def load_report(path) -> EvalReport:
    metrics, folds = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            attr = row["attribute"]
            metrics[attr] = MetricValue(ccc=float(row["ccc"]), pearson=float(row["pearson"]), n=int(row["n"]))
            if row.get("fold_ccc"):
                folds[attr] = [float(v) for v in row["fold_ccc"].split(";")]
    return EvalReport(metrics=metrics, folds=folds)


# --------------------------------------------------------------------------- MTL grid search


def simplex_grid(step: float = 0.1) -> List[Tuple[float, float]]:
    k = int(round(1 / step))
    if not math.isclose(k * step, 1.0):
        raise ParameterError("grid step must divide 1")
    return [(i / k, j / k) for i in range(k + 1) for j in range(k + 1 - i)]


def _weight_on(attr_index: int, alpha: float, beta: float) -> float:
    return (alpha, beta, 1 - alpha - beta)[attr_index]


def select_pairs(scores: Dict[Tuple[float, float], Dict[str, float]]) -> Dict[str, Tuple[float, float]]:
    """Best (alpha, beta) per attribute by dev CCC; ties go to the larger weight on
    that attribute, then to the lexicographically smaller pair."""
    best = {}
    for k, attr in enumerate(TARGETS):
        cands = [(pair, s[attr]) for pair, s in scores.items() if attr in s]
        if not cands:
            continue
        pair, _ = min(cands, key=lambda c: (-c[1], -_weight_on(k, *c[0]), c[0]))
        best[attr] = pair
    return best


def grid_search_mtl(cfg: RunConfig, data: Optional[DataSet] = None, grid_step: float = 0.1,
                    trainer: Callable = train):
    """Train one MTL system per (alpha, beta) lattice point and pick the best pair for
    each attribute by its best dev CCC across epochs. Returns ``(best_pairs, scores)``."""
    if not cfg.is_mtl:
        raise ParameterError("grid search applies to MTL variants only")
    if data is None:
        data = load_dataset(cfg)
    scores = {}
    for i, (alpha, beta) in enumerate(simplex_grid(grid_step)):
        seed = int(RngStream(cfg.seed).fork(1000 + i).seed % (2**31))
        run = trainer(replace(cfg, alpha=alpha, beta=beta, seed=seed), data)
        per_attr = {}
        for attr in TARGETS:
            vals = [h["dev_ccc"][attr] for h in run.history if attr in h["dev_ccc"]]
            if vals:
                per_attr[attr] = max(vals)
        scores[(alpha, beta)] = per_attr
        log.info("grid alpha=%.1f beta=%.1f dev %s", alpha, beta, per_attr)
    return select_pairs(scores), scores
