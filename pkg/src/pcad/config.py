"""Experiment configuration: one JSON document, validated against a shipped schema."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .checkpoint import canonical_json
from .data import ClassMap, SceneRecipe, default_class_map, default_recipe
from .errors import ContractError
from .models import ModelConfig

RECON_MODES = ("objects", "scene")
DETECTOR_INPUTS = ("delta", "raw")
AUG_MODES = ("rubik", "scale", "none")
ANOMALY_PROTOCOLS = ("synthetic", "train_classes")


def load_schema() -> dict:
    text = resources.files("pcad").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None
    n_scenes: int = 200
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    recipe: dict = field(default_factory=lambda: default_recipe().to_dict())


@dataclass(frozen=True)
class TrainingConfig:
    recon_epochs: int = 8
    detect_epochs: int = 8
    lr: float = 1e-3
    checkpoint_every: int = 1
    recon_loss: str = "mse"
    validate: bool = True


@dataclass(frozen=True)
class AugmentationConfig:
    mode: str = "rubik"
    rate: float = 0.5
    center: str = "centroid"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every switch of an experiment, with defaults filled in on load."""

    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    class_map: dict = field(default_factory=lambda: default_class_map().to_dict())
    block_size: float = 2.0
    depth: int = 6
    widths: tuple[int, ...] = (32, 64, 128)
    d_state: int = 16
    blocks_per_stage: int = 2
    head_hidden: int = 32
    scan_chunk: int | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    recon_mode: str = "objects"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    detector_input: str = "delta"
    anomaly_protocol: str = "synthetic"

    def __post_init__(self):
        if self.recon_mode not in RECON_MODES:
            raise ContractError(f"recon_mode must be one of {RECON_MODES}")
        if self.detector_input not in DETECTOR_INPUTS:
            raise ContractError(f"detector_input must be one of {DETECTOR_INPUTS}")
        if self.augmentation.mode not in AUG_MODES:
            raise ContractError(f"augmentation.mode must be one of {AUG_MODES}")
        if self.anomaly_protocol not in ANOMALY_PROTOCOLS:
            raise ContractError(f"anomaly_protocol must be one of {ANOMALY_PROTOCOLS}")
        if abs(sum(self.dataset.split) - 1.0) > 1e-9:
            raise ContractError("dataset split fractions must sum to 1")

    # -- views -------------------------------------------------------------
    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            widths=tuple(self.widths), d_state=self.d_state, blocks_per_stage=self.blocks_per_stage,
            depth=self.depth, block_size=self.block_size, scan_chunk=self.scan_chunk,
            head_hidden=self.head_hidden,
        )

    @property
    def classes(self) -> ClassMap:
        return ClassMap.from_dict(self.class_map)

    @property
    def recipe(self) -> SceneRecipe:
        return SceneRecipe.from_dict(self.dataset.recipe)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=int(seed))

    def replace(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        try:
            jsonschema.validate(d, load_schema())
        except jsonschema.ValidationError as exc:
            raise ContractError(f"invalid config: {exc.message}") from exc
        d = dict(d)
        nested = {"dataset": DatasetConfig, "training": TrainingConfig, "augmentation": AugmentationConfig}
        for key, kind in nested.items():
            if key in d:
                sub = dict(d[key])
                if "split" in sub:
                    sub["split"] = tuple(sub["split"])
                d[key] = kind(**sub)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


def toy_config(**changes) -> ExperimentConfig:
    """Small model preset that trains on the synthetic benchmark in minutes."""
    base = ExperimentConfig(widths=(16, 32, 64), d_state=8, blocks_per_stage=1)
    return replace(base, **changes)
