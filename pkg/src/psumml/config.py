"""JSON run configuration: scenario, data, train, eval and output sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .labels import ScenarioSpec
from .synth import ModalityStyle, PhantomConfig, default_styles
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    styles: dict[str, ModalityStyle] = field(default_factory=default_styles)
    n_per_modality: int = 250


@dataclass
class EvalSection:
    split: str = "test"
    spacing: float = 1.0


@dataclass
class RunConfig:
    organs_a: tuple[int, ...] = (1, 3)
    organs_b: tuple[int, ...] = (2, 4)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs"

    @property
    def scenario(self) -> ScenarioSpec:
        return ScenarioSpec.from_organs(self.organs_a, self.organs_b)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": {"organs_a": list(self.organs_a), "organs_b": list(self.organs_b)},
            "data": {
                "phantom": asdict(self.data.phantom),
                "styles": {m: asdict(s) for m, s in self.data.styles.items()},
                "n_per_modality": self.data.n_per_modality,
            },
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "output": {"dir": self.output_dir},
        }


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _build(cls, section: str, d: dict):
    names = [f.name for f in fields(cls)]
    _check_keys(section, d, names)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


def from_dict(d: dict) -> RunConfig:
    _check_keys("<root>", d, ["schema_version", "scenario", "data", "train", "eval", "output"])
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    cfg = RunConfig()
    if "scenario" in d:
        _check_keys("scenario", d["scenario"], ["organs_a", "organs_b"])
        cfg.organs_a = tuple(d["scenario"].get("organs_a", cfg.organs_a))
        cfg.organs_b = tuple(d["scenario"].get("organs_b", cfg.organs_b))
    if "data" in d:
        data = d["data"]
        _check_keys("data", data, ["phantom", "styles", "n_per_modality"])
        if "phantom" in data:
            cfg.data.phantom = _build(PhantomConfig, "data.phantom", data["phantom"])
        if "styles" in data:
            _check_keys("data.styles", data["styles"], ["A", "B"])
            for m, s in data["styles"].items():
                cfg.data.styles[m] = _build(ModalityStyle, f"data.styles.{m}", {"modality_id": m, **s})
        if "n_per_modality" in data:
            cfg.data.n_per_modality = int(data["n_per_modality"])
    if "train" in d:
        cfg.train = _build(TrainConfig, "train", d["train"])
    if "eval" in d:
        cfg.eval = _build(EvalSection, "eval", d["eval"])
    if "output" in d:
        _check_keys("output", d["output"], ["dir"])
        cfg.output_dir = d["output"].get("dir", cfg.output_dir)
    try:
        cfg.scenario
    except ValueError as e:
        raise ConfigError(f"invalid scenario: {e}") from e
    return cfg


def load_config(path) -> RunConfig:
    """Parse a config file; JSON syntax errors are reported with line and column."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return from_dict(d)
