"""Run configuration: one JSON file per command plus dotted ``--set`` overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from . import _serde
from .data import SynthConfig
from .errors import ConfigError
from .model import Freeze, FusionMode, ModelConfig
from .training import Objective, TrainConfig


@dataclass
class ExternalConfig:
    """A second synthetic distribution sharing the disease directions."""

    n_samples: int = 500
    noise_std: float | None = None
    signal_amplitude: float | None = None
    prevalence: list[float] | None = None

    def synth(self, base: SynthConfig) -> SynthConfig:
        return replace(
            base,
            n_samples=self.n_samples,
            noise_std=base.noise_std if self.noise_std is None else self.noise_std,
            signal_amplitude=base.signal_amplitude if self.signal_amplitude is None else self.signal_amplitude,
            prevalence=list(base.prevalence) if self.prevalence is None else list(self.prevalence),
        )


@dataclass
class Paths:
    data: str = "runs/data"
    checkpoint: str = "runs/model.ckpt"
    report: str = "runs/report.json"
    embeddings: str = "runs/embeddings.tsv"
    ablate: str = "runs/ablate"


@dataclass
class GridConfig:
    objectives: list[str] = field(default_factory=lambda: [o.value for o in Objective])
    fusion_modes: list[str] = field(default_factory=lambda: [FusionMode.SEPARATED.value])
    freezes: list[str] = field(default_factory=lambda: [Freeze.NONE.value])
    use_mixed: list[bool] = field(default_factory=lambda: [True])
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "GridConfig":
        for name, enum_cls, values in (
            ("grid.objectives", Objective, self.objectives),
            ("grid.fusion_modes", FusionMode, self.fusion_modes),
            ("grid.freezes", Freeze, self.freezes),
        ):
            if not values:
                raise ConfigError(name, "must not be empty")
            for v in values:
                try:
                    enum_cls(v)
                except ValueError:
                    raise ConfigError(name, f"unknown value {v!r}") from None
        if not self.use_mixed or any(not isinstance(v, bool) for v in self.use_mixed):
            raise ConfigError("grid.use_mixed", "must be a non-empty list of booleans")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("grid.seeds", "must be a non-empty list of non-negative integers")
        return self


def _default_train() -> TrainConfig:
    return TrainConfig(epochs=10, batch_size=16, learning_rate=1e-2, model=ModelConfig(d=32))


@dataclass
class RunConfig:
    """Everything one command needs.  ``seed`` drives data, split and training."""

    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: list[float] = field(default_factory=lambda: [0.75, 0.25])
    external: ExternalConfig | None = None
    train: TrainConfig = field(default_factory=_default_train)
    paths: Paths = field(default_factory=Paths)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        _prefixed("synth.", self.synth.validate)
        if len(self.split) != 2 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split", f"must be two non-negative fractions summing to 1, got {self.split}")
        if self.external is not None:
            _prefixed("external.", self.external.synth(self.synth).validate)
        self.train.seed = self.seed
        _prefixed("train.", lambda: self.train.validate(self.synth.D))
        self.grid.validate()
        return self

    def to_dict(self) -> dict:
        return _serde.to_dict(self)


def _prefixed(prefix: str, fn):
    try:
        return fn()
    except ConfigError as exc:
        if exc.field.startswith(prefix):
            raise
        raise ConfigError(prefix + exc.field, str(exc).split(": ", 1)[-1]) from None


def parse_value(text: str):
    """JSON when it parses (numbers, booleans, lists, null), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    parts = key.split(".")
    if not key or any(not p for p in parts):
        raise ConfigError(key or assignment, "empty key in override")
    node = data
    for i, p in enumerate(parts[:-1]):
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        elif not isinstance(child, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is not a section")
        node = child
    node[parts[-1]] = parse_value(raw)


def default_config_dict() -> dict:
    text = resources.files("bimcq").joinpath("configs/default.json").read_text(encoding="utf-8")
    return json.loads(text)


def build_run_config(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    train = data.get("train")
    if isinstance(train, dict):
        train = dict(train)
        train.pop("seed", None)
        data["train"] = train
    for key in ("synth", "external", "train", "paths", "grid"):
        value = data.get(key)
        if value is not None and not isinstance(value, dict):
            raise ConfigError(key, "must be a JSON object")
    if "train" in data:
        base = _serde.to_dict(_default_train())
        base.pop("seed")
        merged = _deep_merge(base, data["train"])
        data["train"] = _serde.from_dict(TrainConfig, merged, "train.")
    return _serde.from_dict(RunConfig, data).validate()


def _deep_merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_run_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read ``path`` (or the packaged default), apply ``key=value`` overrides, validate."""
    if path is None:
        data = default_config_dict()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    return build_run_config(data)

