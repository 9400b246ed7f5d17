"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from ladder_ser.errors import ParameterError

MODEL_KINDS = ("dense-HLD", "cnn-LLD", "cnn-MFB")
VARIANTS = ("STL", "MTL", "Lad+L+STL", "Lad+L+MTL", "Lad+UL+STL", "Lad+UL+MTL")
TARGETS = ("arousal", "valence", "dominance")


@dataclass
class RunConfig:
    model: str = "dense-HLD"
    variant: str = "Lad+UL+STL"
    target: str = "arousal"
    alpha: float = 1 / 3
    beta: float = 1 / 3
    noise_var: float = 0.3
    lambda_l: float = 1.0
    baseline_dropout: float = 0.5
    ladder_dropout: float = 0.1
    hidden: Tuple[int, ...] = (256, 256)
    combinator: str = "mlp"
    lr: float = 5e-5
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    unlabeled_policy: str = "subsample"
    frames: int = 1000
    features: str = ""
    labels: str = ""
    unlabeled_features: str = ""
    feature_format: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.target not in TARGETS:
            raise ParameterError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.is_mtl and not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1 and self.alpha + self.beta <= 1 + 1e-12):
            raise ParameterError("MTL requires alpha, beta in [0, 1] with alpha + beta <= 1")
        if self.noise_var < 0 or self.lambda_l < 0:
            raise ParameterError("noise variance and reconstruction weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 2:
            raise ParameterError("epochs must be >= 0 and batch size >= 2")
        if self.unlabeled_policy not in ("subsample", "full"):
            raise ParameterError("unlabeled_policy must be 'subsample' or 'full'")

    @property
    def is_ladder(self) -> bool:
        return self.variant.startswith("Lad")

    @property
    def uses_unlabeled(self) -> bool:
        return "+UL+" in self.variant

    @property
    def is_mtl(self) -> bool:
        return self.variant.endswith("MTL")

    @property
    def task(self) -> str:
        return "MTL" if self.is_mtl else "STL"

    @property
    def target_index(self) -> int:
        return TARGETS.index(self.target)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.noise_var) if self.is_ladder else 0.0

    @property
    def input_dropout(self) -> float:
        return self.ladder_dropout if self.is_ladder else self.baseline_dropout

    @property
    def hidden_dropout(self) -> float:
        return 0.0 if self.is_ladder else self.baseline_dropout

    @property
    def effective_weights(self) -> Tuple[float, float]:
        """(alpha, beta) actually used: STL variants put all weight on the target."""
        if self.is_mtl:
            return self.alpha, self.beta
        return {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (0.0, 0.0)}[self.target_index]

    def to_dict(self) -> Dict[str, object]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown configuration keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(v) for v in d["hidden"])
        return cls(**d)

    def with_overrides(self, overrides: Dict[str, str]) -> "RunConfig":
        d = self.to_dict()
        types = {f.name: f.type for f in fields(RunConfig)}
        for key, raw in overrides.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ParameterError(f"unknown configuration key {key!r}")
            d[key] = _coerce(key, raw, types[key])
        return RunConfig.from_dict(d)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("Tuple"):
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise ParameterError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    values: Dict[str, str] = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    if overrides:
        values.update(overrides)
    return RunConfig().with_overrides(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(map(str, v))
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
