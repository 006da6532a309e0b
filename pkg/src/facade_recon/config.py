"""Run configuration: JSON in, typed dataclasses out, and back again."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import MaskScenario, SynthConfig
from .errors import ConfigError
from .forecast import ForecastConfig
from .graph import FacadeGraph
from .model import ModelConfig
from .training import LossConfig, TrainConfig


@dataclass
class GraphConfig:
    rows: int = 25
    cols: int = 5
    sensors: list[int] | None = None

    def build(self) -> FacadeGraph:
        return FacadeGraph.build(self.rows, self.cols, self.sensors)


@dataclass
class InferenceConfig:
    window: int = 200
    hop: int = 100
    kind: str = "hann"
    eps: float = 1e-8
    batch: int = 8
    nperseg: int = 256
    units: str = "physical"
    bands: list[list[float]] = field(default_factory=list)


@dataclass
class ScenarioConfig:
    name: str = "outage"
    masked: list[int] = field(default_factory=lambda: [0, 1])

    def build(self, graph: FacadeGraph) -> MaskScenario:
        return MaskScenario.for_graph(graph, self.masked)


@dataclass
class RunConfig:
    seed: int
    graph: GraphConfig = field(default_factory=GraphConfig)
    data: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    scenarios: list[ScenarioConfig] = field(default_factory=lambda: [ScenarioConfig()])
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    precision: str = "float32"
    threads: int = 1

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {
    "graph": GraphConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "forecast": ForecastConfig,
}


def build_section(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown field")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if "seed" not in raw:
        raise ConfigError("seed: required (no wall-clock seeding)")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("seed: must be an integer")
    known = set(_SECTIONS) | {"seed", "data", "scenarios", "precision", "threads"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    kw = {"seed": raw["seed"]}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kw[key] = build_section(cls, raw[key], key)
    if "data" in raw:
        data = raw["data"]
        if not isinstance(data, dict):
            raise ConfigError("data: expected an object")
        if "synth" in data:
            build_section(SynthConfig, data["synth"], "data.synth")
        kw["data"] = data
    if "scenarios" in raw:
        if not isinstance(raw["scenarios"], list):
            raise ConfigError("scenarios: expected a list")
        kw["scenarios"] = [build_section(ScenarioConfig, s, f"scenarios[{i}]")
                           for i, s in enumerate(raw["scenarios"])]
    for key in ("precision", "threads"):
        if key in raw:
            kw[key] = raw[key]
    if kw.get("precision", "float32") not in ("float32", "float64"):
        raise ConfigError("precision: must be 'float32' or 'float64'")
    return RunConfig(**kw)


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(raw)


def synth_config(raw: dict) -> SynthConfig:
    return build_section(SynthConfig, raw, "synth")


def scenario_from_json(raw, graph: FacadeGraph) -> MaskScenario:
    """Accepts ``{"masked": [...]}`` or a bare list of local sensor indices."""
    masked = raw.get("masked", []) if isinstance(raw, dict) else raw
    if not isinstance(masked, list) or not all(isinstance(m, int) for m in masked):
        raise ConfigError("scenario.masked: expected a list of local sensor indices")
    return MaskScenario.for_graph(graph, masked)
