"""Run configuration: nested dataclasses loaded from JSON and overridden by command-line flags."""

import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import torch

from errors import ConfigError

logger = logging.getLogger(__name__)

ENV_THREADS = "CASCADE_NVS_THREADS"
RESOLVED_NAME = "config.resolved.json"
BACKENDS = ("photometric", "learned")
# fixed depth ranges with adaptive scaling disabled
PRESETS = {
    "dtu": {"scaling.adaptive": False, "scaling.d1_min": 425.0, "schedule.delta1": 10.6, "schedule.M1": 48},
}


@dataclass
class ScheduleConfig:
    K: int = 3
    M1: int = 48
    # None: derived from the depth range, Δ1 = (f·d_max − C)/M1
    delta1: Optional[float] = None


@dataclass
class ScalingConfig:
    adaptive: bool = True
    C: float = 100.0
    # None: taken from the dataset cameras
    d_min: Optional[float] = None
    d_max: Optional[float] = None
    # literal first plane when adaptive scaling is off
    d1_min: Optional[float] = None


@dataclass
class ThresholdConfig:
    tau_p: float = 0.3
    tau_px: float = 1.0
    tau_rel: float = 0.01
    S: int = 3
    # None: 1% of the ground-truth cloud's bounding-box diagonal
    tau_f: Optional[float] = None


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_scene: int = 2
    lr: float = 1e-3
    lambda_l1: float = 1.0
    lambda_p: float = 10.0
    lambda_G: float = 1.0
    lambda_d: float = 1.0
    candidates: int = 10
    holdout_every: int = 8
    init_checkpoint: Optional[str] = None


@dataclass
class ModelConfig:
    backend: str = "photometric"
    use_spade: bool = True
    use_recurrence: bool = True
    beta: float = 1e5
    window: int = 3


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    output: str = "out"
    N: int = 4
    Q: int = 3
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, data:Mapping[str, Any]) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(str(path), "top level must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides:Mapping[str, Any]) -> "RunConfig":
        ''' Copy with dotted-path fields replaced; None values are skipped '''
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(key, "unknown configuration section")
                node = node[p]
            if leaf not in node:
                raise ConfigError(key, "unknown configuration field")
            node[leaf] = value
        return RunConfig.from_dict(data)

    def validate(self) -> "RunConfig":
        s, sc, th, tr, m = self.schedule, self.scaling, self.thresholds, self.train, self.model
        _require(self.N >= 1, "N", f"must be >= 1, got {self.N}")
        _require(self.Q >= 1, "Q", f"must be >= 1, got {self.Q}")
        _require(s.K >= 1, "schedule.K", f"must be >= 1, got {s.K}")
        _require(s.M1 % (2 ** (s.K - 1)) == 0 and s.M1 // 2 ** (s.K - 1) >= 2, "schedule.M1",
                 f"{s.M1} must be divisible by 2^(K-1) = {2 ** (s.K - 1)} leaving at least 2 planes")
        _require(s.delta1 is None or s.delta1 > 0, "schedule.delta1", f"must be positive, got {s.delta1}")
        _require(sc.C > 0, "scaling.C", f"must be positive, got {sc.C}")
        if sc.d_min is not None or sc.d_max is not None:
            _require(sc.d_min is not None and sc.d_max is not None and 0 < sc.d_min < sc.d_max,
                     "scaling.d_min", f"need 0 < d_min < d_max, got {sc.d_min}, {sc.d_max}")
        if not sc.adaptive:
            _require(sc.d1_min is not None and sc.d1_min > 0, "scaling.d1_min", "required and positive when adaptive scaling is off")
            _require(s.delta1 is not None, "schedule.delta1", "required when adaptive scaling is off")
        _require(0 <= th.tau_p, "thresholds.tau_p", f"must be >= 0, got {th.tau_p}")
        _require(th.tau_px > 0, "thresholds.tau_px", f"must be positive, got {th.tau_px}")
        _require(th.tau_rel > 0, "thresholds.tau_rel", f"must be positive, got {th.tau_rel}")
        _require(th.S >= 0, "thresholds.S", f"must be >= 0, got {th.S}")
        _require(th.tau_f is None or th.tau_f > 0, "thresholds.tau_f", f"must be positive, got {th.tau_f}")
        _require(tr.epochs >= 0, "train.epochs", f"must be >= 0, got {tr.epochs}")
        _require(tr.steps_per_scene >= 1, "train.steps_per_scene", f"must be >= 1, got {tr.steps_per_scene}")
        _require(tr.lr > 0, "train.lr", f"must be positive, got {tr.lr}")
        for name in ("lambda_l1", "lambda_p", "lambda_G", "lambda_d"):
            _require(getattr(tr, name) >= 0, f"train.{name}", "loss weights must be >= 0")
        _require(tr.candidates >= 1, "train.candidates", f"must be >= 1, got {tr.candidates}")
        _require(tr.holdout_every >= 2, "train.holdout_every", f"must be >= 2, got {tr.holdout_every}")
        _require(m.backend in BACKENDS, "model.backend", f"must be one of {BACKENDS}, got `{m.backend}`")
        _require(m.beta > 0, "model.beta", f"must be positive, got {m.beta}")
        _require(m.window >= 1 and m.window % 2 == 1, "model.window", f"must be a positive odd number, got {m.window}")
        return self

    def write_resolved(self, outdir) -> Path:
        path = Path(outdir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path


def _require(ok:bool, field_name:str, message:str) -> None:
    if not ok:
        raise ConfigError(field_name, message)


def _build(cls, data:Mapping[str, Any], prefix:str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(path, "unknown configuration field")
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            if not isinstance(value, Mapping):
                raise ConfigError(path, "expected an object")
            kwargs[key] = _build(type(default), value, path + ".")
        else:
            kwargs[key] = _coerce(path, known[key], value)
    return cls(**kwargs)


def _coerce(path:str, spec:dataclasses.Field, value):
    ''' JSON scalars to the field's declared type; None only where the field is Optional '''
    default = spec.default
    if default is None:
        if value is None:
            return value
        # Optional[T] fields are checked against T
        default = next(t for t in typing.get_args(spec.type) if t is not type(None))()
    if value is None:
        raise ConfigError(path, "must not be null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def threads_from_env() -> int:
    ''' Worker cap from CASCADE_NVS_THREADS; 0 or unset means automatic '''
    raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(ENV_THREADS, f"expected an integer, got `{raw}`") from None
    if n < 0:
        raise ConfigError(ENV_THREADS, f"must be >= 0, got {n}")
    return n


def apply_threads() -> int:
    ''' Cap torch intra-op threads; returns the number of concurrent render groups allowed '''
    n = threads_from_env()
    if n > 0:
        torch.set_num_threads(n)
        logger.debug(f"{ENV_THREADS}={n}")
        return n
    return max(1, os.cpu_count() or 1)
