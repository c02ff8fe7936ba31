"""JSON run configuration."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .learners import LEARNERS
from .learners.base import TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ConfigFileError(ConfigError):
    pass


@dataclass
class DatasetConfig:
    """Synthetic blobs, or a pair of CLDS table files."""

    name: str = "blobs"
    num_classes: int = 20
    per_class: int = 20
    test_per_class: int = 10
    dim: int = 32
    spread: float = 0.5
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    @property
    def from_files(self) -> bool:
        return self.train_path is not None


@dataclass
class RunConfig:
    model_name: str
    init_cls: int
    increment: int
    dataset: DatasetConfig
    backbone_type: str = "frozen_pretrained_toy"
    seed: int = 1993
    shuffle: bool = True
    fixed_memory: bool = False
    memory_size: int = 2000
    memory_per_class: int = 20
    optimization: TrainConfig = field(default_factory=TrainConfig)
    model_specific: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


REQUIRED = ("model_name", "init_cls", "increment", "dataset")
EXEMPLAR_KEYS = ("fixed_memory", "memory_size", "memory_per_class")

# expected type per scalar key
_SCALARS = {
    int: "an integer",
    float: "a number",
    bool: "a boolean",
    str: "a string",
}


def _expect(value, kind, name: str, optional: bool = False):
    if value is None and optional:
        return None
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return float(value) if ok else _bad(name, kind, value)
    if kind is int and isinstance(value, bool):
        return _bad(name, kind, value)
    if not isinstance(value, kind):
        return _bad(name, kind, value)
    return value


def _bad(name, kind, value):
    raise ConfigError(name, f"expected {_SCALARS[kind]}, got {type(value).__name__} {value!r}")


def _section(raw, cls, name: str, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError(name, f"expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    out = {}
    for key, value in raw.items():
        if key in skip:
            out[key] = value
            continue
        kind = _type_of(known[key])
        out[key] = _expect(value, kind, f"{name}.{key}", optional=True)
    return cls(**out)


def _type_of(f) -> type:
    t = str(f.type)
    for kind in (bool, int, float, str):
        if t.startswith(kind.__name__):
            return kind
    raise AssertionError(f"no scalar type for {f.name}")


def parse_config_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "required key missing")

    name = _expect(raw["model_name"], str, "model_name")
    if name.strip().lower() not in LEARNERS:
        raise ConfigError("model_name", f"unknown model {name!r}; valid: {', '.join(LEARNERS)}")
    name = name.strip().lower()
    kw = {"model_name": name}
    for key in ("init_cls", "increment", "seed", "memory_size", "memory_per_class"):
        if key in raw:
            kw[key] = _expect(raw[key], int, key)
    for key in ("fixed_memory", "shuffle"):
        if key in raw:
            kw[key] = _expect(raw[key], bool, key)
    if "backbone_type" in raw:
        kw["backbone_type"] = _expect(raw["backbone_type"], str, "backbone_type")
    for key in ("init_cls", "increment"):
        if kw[key] < 1:
            raise ConfigError(key, "must be >= 1")

    kw["dataset"] = _section(raw["dataset"], DatasetConfig, "dataset")
    ds = kw["dataset"]
    if (ds.train_path is None) != (ds.test_path is None):
        raise ConfigError("dataset.test_path" if ds.test_path is None else "dataset.train_path",
                          "train_path and test_path must be given together")
    if not ds.from_files and ds.name != "blobs":
        raise ConfigError("dataset.name", f"unknown dataset {ds.name!r}; use 'blobs' or CLDS paths")

    opt = raw.get("optimization", {})
    if isinstance(opt, dict) and "milestones" in opt:
        ms = opt["milestones"]
        if not isinstance(ms, list) or not all(isinstance(m, int) and not isinstance(m, bool)
                                               for m in ms):
            raise ConfigError("optimization.milestones", "expected a list of integers")
    kw["optimization"] = _section(opt, TrainConfig, "optimization", skip=("milestones",))
    if kw["optimization"].optimizer not in ("adam", "sgd"):
        raise ConfigError("optimization.optimizer", "expected 'adam' or 'sgd'")

    for key in ("model_specific", "backbone"):
        if key in raw:
            if not isinstance(raw[key], dict):
                raise ConfigError(key, f"expected an object, got {type(raw[key]).__name__}")
            kw[key] = dict(raw[key])
    learner = LEARNERS[name]
    unknown = set(kw.get("model_specific", {})) - set(learner.PARAMS)
    if unknown:
        raise ConfigError(f"model_specific.{sorted(unknown)[0]}",
                          f"not a parameter of {name}; known: {sorted(learner.PARAMS)}")

    if not learner.uses_exemplars:
        present = [k for k in EXEMPLAR_KEYS if k in raw]
        if present:
            log.info("%s does not use exemplars; ignoring %s", name, ", ".join(present))
    return RunConfig(**kw)


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigFileError("--config", f"no such config file: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigFileError("--config", f"{p} is not valid JSON: {e}") from e
    return parse_config_dict(raw)
