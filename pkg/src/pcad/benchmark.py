"""The synthetic open-set benchmark used to compare detector variants.

One run generates the scenes for a seed, splits them 70/10/20, trains a
reconstructor (unless one is passed in), trains a detector and scores it on
the test split.  Variants that differ only in the detector share the same
scenes and, for the same seed, the same reconstructor.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

from .cli import assign_splits
from .config import AugmentationConfig, ExperimentConfig, TrainingConfig, toy_config
from .data import generate_synthetic_scene
from .models import Reconstructor
from .train import derive_seed, evaluate_scenes, reconstruction_error_split, train_detector, train_reconstructor

N_SCENES = 200


def benchmark_config(seed: int, detector_input: str = "delta", augmentation: str = "rubik",
                     **changes) -> ExperimentConfig:
    training = TrainingConfig(recon_epochs=6, detect_epochs=4, validate=False)
    base = toy_config(seed=seed, depth=8, detector_input=detector_input, training=training,
                      augmentation=AugmentationConfig(mode=augmentation))
    return base.replace(**changes)


def benchmark_scenes(cfg: ExperimentConfig, n_scenes: int = N_SCENES):
    splits = assign_splits(n_scenes, cfg.dataset.split, cfg.seed)
    out = {"train": [], "val": [], "test": []}
    for i, split in enumerate(splits):
        out[split].append(generate_synthetic_scene(derive_seed(cfg.seed, "scene", i), cfg.recipe, cfg.classes))
    return out


@dataclass
class BenchmarkResult:
    seed: int
    detector_input: str
    augmentation: str
    auroc: float
    aupr: float
    miou: float
    data_seconds: float
    recon_seconds: float
    detect_seconds: float
    recon_error_anomalous: float | None = None
    recon_error_inset: float | None = None

    @property
    def seconds(self) -> float:
        """Wall time of a standalone run: scenes, reconstructor, detector, evaluation."""
        return self.data_seconds + self.recon_seconds + self.detect_seconds

    def to_dict(self) -> dict:
        return asdict(self)


def run_benchmark(cfg: ExperimentConfig, n_scenes: int = N_SCENES, recon: Reconstructor | None = None,
                  recon_seconds: float = 0.0) -> tuple[BenchmarkResult, Reconstructor | None]:
    """Train and score one detector variant; returns the result and the reconstructor used."""
    t0 = time.perf_counter()
    scenes = benchmark_scenes(cfg, n_scenes)
    data_seconds = time.perf_counter() - t0
    errors = (None, None)
    if cfg.detector_input == "delta":
        if recon is None:
            t0 = time.perf_counter()
            recon, _ = train_reconstructor(scenes["train"], cfg)
            recon_seconds = time.perf_counter() - t0
        errors = reconstruction_error_split(recon, scenes["test"], cfg)
    else:
        recon_seconds = 0.0
    t0 = time.perf_counter()
    detector, _ = train_detector(scenes["train"], cfg, recon if cfg.detector_input == "delta" else None)
    report = evaluate_scenes(detector, recon, scenes["test"], cfg)
    result = BenchmarkResult(
        cfg.seed, cfg.detector_input, cfg.augmentation.mode, report.auroc, report.aupr, report.miou,
        data_seconds, recon_seconds, time.perf_counter() - t0, *errors,
    )
    return result, recon
