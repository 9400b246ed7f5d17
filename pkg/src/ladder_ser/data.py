"""Feature/label ingestion, z-normalization, label-scale mapping, padding, batch
scheduling and the synthetic semi-supervised task."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from ladder_ser.errors import DataFormatError, DimensionError, ParameterError, ScheduleError
from ladder_ser.numerics import RngStream

SENTENCE = "sentence"
FRAME = "frame"
SPLITS = ("train", "dev", "test", "unlabeled")
LABEL_COLUMNS = ("arousal", "valence", "dominance")

FEATURE_MAGIC = b"LSFT"
FEATURE_VERSION = 1


@dataclass
class DataSet:
    """Sentence-level features are an ``n x d`` array; frame-level features are a
    list of ``d x T_i`` arrays. Unlabeled rows carry NaN labels."""

    kind: str
    ids: List[str]
    features: Union[np.ndarray, List[np.ndarray]]
    labels: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DataFormatError(f"duplicate sample id {dup!r}")
        if self.labels is None:
            self.labels = np.full((n, 3), np.nan)
        if self.split is None:
            self.split = np.array(["unlabeled"] * n, dtype=object)
        if len(self.features) != n or len(self.labels) != n or len(self.split) != n:
            raise DimensionError("ids, features, labels and split must have one entry per sample")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        if self.kind == SENTENCE:
            return self.features.shape[1] if np.ndim(self.features) == 2 else 0
        return self.features[0].shape[0] if len(self.features) else 0

    @property
    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.labels).any(axis=1)

    def take(self, index) -> "DataSet":
        index = np.asarray(index, dtype=int)
        feats = self.features[index] if self.kind == SENTENCE else [self.features[i] for i in index]
        return DataSet(
            kind=self.kind,
            ids=[self.ids[i] for i in index],
            features=feats,
            labels=self.labels[index],
            split=self.split[index],
            latents=None if self.latents is None else self.latents[index],
        )

    def subset(self, split: str) -> "DataSet":
        return self.take(np.flatnonzero(self.split == split))

    def feature_tensor(self, frames: Optional[int] = None) -> np.ndarray:
        """Features as one array; frame-level data is padded/truncated to ``frames``."""
        if self.kind == SENTENCE:
            return np.asarray(self.features)
        if frames is None:
            raise ParameterError("frame-level data needs a frame count to form a tensor")
        if not len(self.features):
            return np.zeros((0, 0, frames))
        return np.stack([pad_or_truncate(s, frames) for s in self.features])


# --------------------------------------------------------------------------- file formats


def _fmt_of(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        return fmt
    return "bin" if path.suffix in (".bin", ".lsft") else "csv"


def load_features(path, fmt: Optional[str] = None, kind: str = SENTENCE, dim: Optional[int] = None) -> DataSet:
    """Read a feature file.

    Text layout (sentence): header ``id,f0,...``, one row per sample.
    Text layout (frame): header ``id,frame,f0,...``, one row per frame, frames of a
    sample contiguous and numbered from 0.
    Binary layout: see :func:`save_features`.
    """
    path = Path(path)
    if kind not in (SENTENCE, FRAME):
        raise ParameterError(f"unknown feature kind {kind!r}")
    if _fmt_of(path, fmt) == "bin":
        ds = _load_binary(path)
        if ds.kind != kind:
            raise DataFormatError(f"{path}: file holds {ds.kind} features, expected {kind}")
    else:
        ds = _load_csv(path, kind)
    if dim is not None and len(ds) and ds.dim != dim:
        raise DimensionError(f"{path}: expected {dim} features, file has {ds.dim}")
    return ds


def _load_csv(path: Path, kind: str) -> DataSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: missing header row") from None
        lead = 2 if kind == FRAME else 1
        if len(header) <= lead or header[0] != "id" or (kind == FRAME and header[1] != "frame"):
            raise DataFormatError(f"{path}: malformed header")
        d = len(header) - lead
        ids: List[str] = []
        rows: List[List[float]] = []
        frames: Dict[str, List[List[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + lead:
                raise DimensionError(f"{path}:{lineno}: row {row[0]!r} has {len(row) - lead} values, expected {d}")
            try:
                values = [float(v) for v in row[lead:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed value ({exc})") from None
            sid = row[0]
            if kind == SENTENCE:
                ids.append(sid)
                rows.append(values)
            else:
                seq = frames.get(sid)
                if seq is None:
                    if sid in ids:
                        raise DataFormatError(f"{path}:{lineno}: frames of {sid!r} are not contiguous")
                    ids.append(sid)
                    seq = frames[sid] = []
                elif ids[-1] != sid:
                    raise DataFormatError(f"{path}:{lineno}: frames of {sid!r} are not contiguous")
                if int(row[1]) != len(seq):
                    raise DataFormatError(f"{path}:{lineno}: frame index {row[1]} out of order for {sid!r}")
                seq.append(values)
    if kind == SENTENCE:
        feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    else:
        feats = [np.array(frames[i], dtype=np.float64).reshape(-1, d).T for i in ids]
    return DataSet(kind=kind, ids=ids, features=feats)


def save_features(ds: DataSet, path, fmt: Optional[str] = None) -> None:
    """Write features as text or binary.

    Binary layout: ``b"LSFT"``, little-endian uint32 version, uint32 header length,
    UTF-8 JSON header ``{"kind", "dim", "ids", "lengths"}``, then the features as
    little-endian float64 in row-major order (frame data: each ``d x T_i`` block in turn).
    """
    path = Path(path)
    if _fmt_of(path, fmt) == "bin":
        lengths = [int(s.shape[1]) for s in ds.features] if ds.kind == FRAME else None
        header = json.dumps({"kind": ds.kind, "dim": ds.dim, "ids": ds.ids, "lengths": lengths}).encode()
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, len(header)) + header)
            if ds.kind == SENTENCE:
                fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
            else:
                for s in ds.features:
                    fh.write(np.ascontiguousarray(s, dtype="<f8").tobytes())
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"f{j}" for j in range(ds.dim)]
        if ds.kind == SENTENCE:
            w.writerow(["id", *cols])
            for sid, row in zip(ds.ids, ds.features):
                w.writerow([sid, *map(repr, map(float, row))])
        else:
            w.writerow(["id", "frame", *cols])
            for sid, seq in zip(ds.ids, ds.features):
                for t in range(seq.shape[1]):
                    w.writerow([sid, t, *map(repr, map(float, seq[:, t]))])


def _load_binary(path: Path) -> DataSet:
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC or len(blob) < 12:
        raise DataFormatError(f"{path}: not a binary feature file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature format version {version}")
    header = json.loads(blob[12:12 + hlen].decode())
    data = np.frombuffer(blob[12 + hlen:], dtype="<f8").astype(np.float64)
    d, ids, kind = header["dim"], header["ids"], header["kind"]
    if kind == SENTENCE:
        if data.size != len(ids) * d:
            raise DimensionError(f"{path}: payload holds {data.size} values, expected {len(ids) * d}")
        feats = data.reshape(len(ids), d)
    else:
        lengths = header["lengths"]
        if data.size != d * sum(lengths):
            raise DimensionError(f"{path}: payload size does not match frame lengths")
        feats, off = [], 0
        for t in lengths:
            feats.append(data[off:off + d * t].reshape(d, t))
            off += d * t
    return DataSet(kind=kind, ids=list(ids), features=feats)


def load_labels(path) -> Dict[str, tuple]:
    """Read ``id,arousal,valence,dominance,split``; blank attributes mean unlabeled."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", *LABEL_COLUMNS, "split"]
        if reader.fieldnames != expected:
            raise DataFormatError(f"{path}: label header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["id"]
            if sid in out:
                raise DataFormatError(f"{path}:{lineno}: duplicate id {sid!r}")
            split = row["split"]
            if split not in SPLITS:
                raise DataFormatError(f"{path}:{lineno}: unknown split {split!r}")
            raw = [row[c] for c in LABEL_COLUMNS]
            if all(v == "" for v in raw):
                vals = (math.nan,) * 3
            elif any(v == "" for v in raw):
                raise DataFormatError(f"{path}:{lineno}: {sid!r} is missing some attribute values")
            else:
                vals = tuple(float(v) for v in raw)
            if split == "unlabeled" and not math.isnan(vals[0]):
                raise DataFormatError(f"{path}:{lineno}: unlabeled sample {sid!r} carries labels")
            if split != "unlabeled" and math.isnan(vals[0]):
                raise DataFormatError(f"{path}:{lineno}: {split} sample {sid!r} has no labels")
            out[sid] = (vals, split)
    return out


def attach_labels(ds: DataSet, labels: Dict[str, tuple]) -> DataSet:
    """Join a label table onto features by id. Ids absent from the table are unlabeled."""
    lab = np.full((len(ds), 3), np.nan)
    split = np.array(["unlabeled"] * len(ds), dtype=object)
    for i, sid in enumerate(ds.ids):
        if sid in labels:
            lab[i], split[i] = labels[sid]
    return replace(ds, labels=lab, split=split)


def save_labels(ds: DataSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *LABEL_COLUMNS, "split"])
        for sid, lab, sp in zip(ds.ids, ds.labels, ds.split):
            vals = ["" if math.isnan(v) else repr(float(v)) for v in lab]
            w.writerow([sid, *vals, sp])


# --------------------------------------------------------------------------- normalization


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    keep: np.ndarray
    label_mean: np.ndarray
    label_std: np.ndarray

    @property
    def dropped(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(~self.keep)]

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "keep": self.keep.astype(np.float64),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
        }

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_std=np.asarray(d["feature_std"], dtype=np.float64),
            keep=np.asarray(d["keep"]) > 0.5,
            label_mean=np.asarray(d["label_mean"], dtype=np.float64),
            label_std=np.asarray(d["label_std"], dtype=np.float64),
        )


def _frame_matrix(ds: DataSet) -> np.ndarray:
    if ds.kind == SENTENCE:
        return np.asarray(ds.features, dtype=np.float64)
    if not ds.features:
        return np.zeros((0, 0))
    return np.concatenate([s.T for s in ds.features], axis=0)


def fit_znorm(train: DataSet) -> NormStats:
    """Feature and label statistics from the train split. Constant features are dropped."""
    if len(train) == 0:
        raise ParameterError("cannot fit normalization statistics on an empty set")
    if np.any(train.split != "train"):
        raise ParameterError("normalization statistics must be fitted on train-split samples only")
    feats = _frame_matrix(train)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    keep = std > 0
    std = np.where(keep, std, 1.0)
    lab = train.labels[train.labeled]
    if len(lab) == 0:
        raise ParameterError("train split has no labeled samples")
    lstd = lab.std(axis=0)
    lstd = np.where(lstd > 0, lstd, 1.0)
    return NormStats(mean, std, keep, lab.mean(axis=0), lstd)


def apply_znorm(ds: DataSet, stats: NormStats) -> DataSet:
    keep, mu, sd = stats.keep, stats.feature_mean, stats.feature_std
    if ds.dim and ds.dim != keep.size:
        raise DimensionError(f"statistics cover {keep.size} features, data has {ds.dim}")
    if ds.kind == SENTENCE:
        feats = ((np.asarray(ds.features) - mu) / sd)[:, keep] if len(ds) else np.zeros((0, int(keep.sum())))
    else:
        feats = [((s.T - mu) / sd).T[keep] for s in ds.features]
    labels = (ds.labels - stats.label_mean) / stats.label_std
    return replace(ds, features=feats, labels=labels)


def invert_labels(y, stats: NormStats) -> np.ndarray:
    return np.asarray(y) * stats.label_std + stats.label_mean


def invert_features(x, stats: NormStats) -> np.ndarray:
    """Map normalized sentence-level features back to raw scale (retained columns only)."""
    keep = stats.keep
    return np.asarray(x) * stats.feature_std[keep] + stats.feature_mean[keep]


# --------------------------------------------------------------------------- label scales


def affine_label_map(y, src_lo: float, src_hi: float, dst_lo: float, dst_hi: float):
    if not (src_hi > src_lo and dst_hi > dst_lo):
        raise ParameterError("label ranges must have hi > lo")
    if (src_lo, src_hi) == (dst_lo, dst_hi):
        return np.array(y, dtype=np.float64)
    return dst_lo + (np.asarray(y, dtype=np.float64) - src_lo) * (dst_hi - dst_lo) / (src_hi - src_lo)


# --------------------------------------------------------------------------- sequences


def pad_or_truncate(seq, frames: int) -> np.ndarray:
    """Right-truncate or right-pad with zero frames to exactly ``frames`` columns."""
    if frames <= 0:
        raise ParameterError("frame count must be positive")
    seq = np.asarray(seq)
    d, t = seq.shape
    if t >= frames:
        return seq[:, :frames].copy()
    out = np.zeros((d, frames), dtype=seq.dtype)
    out[:, :t] = seq
    return out


# --------------------------------------------------------------------------- batching

LABELED = "L"
UNLABELED = "U"
POLICY_SUBSAMPLE = "subsample"
POLICY_FULL = "full"


@dataclass
class Batch:
    features: np.ndarray
    labels: Optional[np.ndarray]
    tag: str
    index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if (self.tag == LABELED) != (self.labels is not None):
            raise ScheduleError("batch tag does not match label presence")


def _chunks(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Split into batches of ``batch_size``; a trailing singleton joins the previous
    batch because batch normalization needs two samples."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def make_schedule(labeled: DataSet, unlabeled: Optional[DataSet], batch_size: int, mode: str = LABELED,
                  epoch_policy: str = POLICY_SUBSAMPLE, rng: Optional[RngStream] = None,
                  frames: Optional[int] = None) -> List[Batch]:
    """One epoch of batches.

    ``mode="L"``: shuffled labeled batches only. ``mode="UL"``: strict alternation
    L, U, L, U, ... Under the subsample policy the unlabeled pool is subsampled to the
    labeled count; under the full policy the labeled stream reshuffles and cycles
    until the unlabeled stream is exhausted.
    """
    if batch_size < 1:
        raise ParameterError("batch size must be at least 1")
    if rng is None:
        raise ParameterError("schedule needs a random stream")
    if mode not in ("L", "UL"):
        raise ParameterError(f"schedule mode must be 'L' or 'UL', got {mode!r}")
    if len(labeled) and not labeled.labeled.all():
        raise ScheduleError("labeled set contains unlabeled samples")
    xl = labeled.feature_tensor(frames)
    yl = labeled.labels

    def lab_batch(idx):
        return Batch(xl[idx], yl[idx], LABELED, idx)

    if mode == "L":
        return [lab_batch(idx) for idx in _chunks(rng.permutation(len(labeled)), batch_size)]

    if unlabeled is None or len(unlabeled) == 0:
        raise ScheduleError("UL schedule requires a non-empty unlabeled pool")
    xu = unlabeled.feature_tensor(frames)

    def unl_batch(idx):
        return Batch(xu[idx], None, UNLABELED, idx)

    lab_chunks = _chunks(rng.permutation(len(labeled)), batch_size)
    if epoch_policy == POLICY_SUBSAMPLE:
        n_take = min(len(labeled), len(unlabeled))
        pool = rng.choice(len(unlabeled), n_take)
        unl_chunks = _chunks(pool, batch_size)
        # equal batch counts even when the unlabeled pool is smaller than the labeled set
        while len(unl_chunks) < len(lab_chunks):
            unl_chunks += _chunks(rng.choice(len(unlabeled), n_take), batch_size)
        unl_chunks = unl_chunks[:len(lab_chunks)]
    elif epoch_policy == POLICY_FULL:
        unl_chunks = _chunks(rng.permutation(len(unlabeled)), batch_size)
        while len(lab_chunks) < len(unl_chunks):
            lab_chunks += _chunks(rng.permutation(len(labeled)), batch_size)
        while len(unl_chunks) < len(lab_chunks):
            unl_chunks += _chunks(rng.permutation(len(unlabeled)), batch_size)
        lab_chunks = lab_chunks[:len(unl_chunks)]
        unl_chunks = unl_chunks[:len(lab_chunks)]
    else:
        raise ParameterError(f"unknown unlabeled epoch policy {epoch_policy!r}")

    schedule = []
    for li, ui in zip(lab_chunks, unl_chunks):
        schedule.append(lab_batch(li))
        schedule.append(unl_batch(ui))
    return schedule


# --------------------------------------------------------------------------- synthetic task


def synth_generate(n_labeled: int, n_unlabeled: int, d: int, latent_k: int, noise: float = 0.5,
                   seed: int = 0, n_dev: int = 500, n_test: int = 1000, dominance_coupling: float = 0.65) -> DataSet:
    """Synthetic stand-in for an emotional speech corpus.

    Latents ``h ~ N(0, I_k)`` are pushed through fixed random maps,
    ``x = A tanh(B h) + noise * eps``. Arousal and valence are smooth functions of
    ``h``; dominance mixes arousal with an independent component so that the two are
    strongly correlated. Labels live on a 1..7-like scale centred at 4.
    """
    if not (d >= latent_k >= 1):
        raise ParameterError("need d >= latent_k >= 1")
    if min(n_labeled, n_unlabeled, n_dev, n_test) < 0 or noise < 0:
        raise ParameterError("sample counts and noise must be non-negative")
    rng = RngStream(seed)
    m = 4 * latent_k
    mix_b = rng.normal((m, latent_k)) * (1.5 / math.sqrt(latent_k))
    mix_a = rng.normal((d, m)) / math.sqrt(m)
    dirs = rng.normal((4, latent_k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    curv = rng.normal((latent_k, latent_k)) / latent_k

    counts = {"train": n_labeled, "unlabeled": n_unlabeled, "dev": n_dev, "test": n_test}
    n = sum(counts.values())
    h = rng.normal((n, latent_k))
    x = np.tanh(h @ mix_b.T) @ mix_a.T
    if noise:
        x = x + noise * rng.normal(x.shape)

    proj = h @ dirs.T
    quad = np.einsum("ni,ij,nj->n", h, curv, h)
    arousal = np.tanh(1.2 * proj[:, 0]) + 0.4 * np.tanh(proj[:, 1]) + 0.3 * quad
    valence = np.tanh(proj[:, 2]) + 0.3 * np.sin(proj[:, 1])
    c = dominance_coupling
    dominance = c * arousal + math.sqrt(1 - c * c) * np.tanh(1.5 * proj[:, 3])
    labels = 4.0 + np.stack([arousal, valence, dominance], axis=1)

    split = np.concatenate([np.array([s] * k, dtype=object) for s, k in counts.items()])
    labels[split == "unlabeled"] = np.nan
    ids = [f"s{i:06d}" for i in range(n)]
    return DataSet(kind=SENTENCE, ids=ids, features=x, labels=labels, split=split, latents=h)
