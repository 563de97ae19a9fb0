"""Training and inference loops for the reconstructor and the detector.

Scenes are processed one per optimizer step.  All randomness (parameter
init, scene order, synthetic anomalies) is derived from the experiment seed,
so a rerun with the same config reproduces every artifact byte for byte.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import inject_synthetic_anomalies
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import ClassMap, LabelSet, PointCloud, mask_default, mask_known
from .errors import ContractError, UndefinedMetricError
from .metrics import EvalReport, aupr, auroc, miou, threshold_sweep
from .models import (
    Detector,
    Reconstructor,
    SceneGeometry,
    delta_channels,
    raw_channels,
    reconstruction_loss,
    semantic_targets,
    total_loss,
)
from .optim import Adam

log = logging.getLogger(__name__)

Scene = tuple[PointCloud, LabelSet]


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from integers and strings."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode())
        else:
            words.append(int(k))
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).view(np.uint64)[0] >> np.uint64(1))


def object_mask(labels: LabelSet, cm: ClassMap) -> np.ndarray:
    """Points belonging to object instances (not surfaces)."""
    return (labels.instance != 0) & ~np.isin(labels.semantic, sorted(cm.surface_classes))


def recon_loss_mask(labels: LabelSet, cm: ClassMap, mode: str) -> np.ndarray | None:
    if mode == "scene":
        return None
    if mode == "objects":
        return object_mask(labels, cm)
    raise ContractError(f"unknown reconstructor mode {mode!r}")


def _write_csv(path: Path, header: Sequence[str], rows: list[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])


def _manifest(cfg: ExperimentConfig, kind: str, epoch: int, step: int, **extra) -> dict:
    return {"kind": kind, "config_hash": cfg.hash(), "seed": cfg.seed, "epoch": epoch, "step": step, **extra}


# ---------------------------------------------------------------------------
# reconstructor


@dataclass
class ReconSample:
    geo: SceneGeometry
    mask: np.ndarray | None


def prepare_recon_samples(scenes: Sequence[Scene], cfg: ExperimentConfig) -> list[ReconSample]:
    """Default-context scenes with the loss mask of the configured mode."""
    cm = cfg.classes
    samples = []
    for cloud, labels in scenes:
        cloud, labels = mask_default(cloud, labels, cm)
        if cloud.n == 0:
            continue
        mask = recon_loss_mask(labels, cm, cfg.recon_mode)
        if mask is not None and not mask.any():
            continue
        samples.append(ReconSample(SceneGeometry(cloud, cfg.model), mask))
    return samples


def recon_step_loss(model: Reconstructor, sample: ReconSample, cfg: ExperimentConfig) -> ad.Tensor:
    out = model(sample.geo)
    return reconstruction_loss(sample.geo.targets, out, cfg.training.recon_loss, sample.mask,
                               leaf_half=sample.geo.leaf_half)


def train_reconstructor(scenes: Sequence[Scene], cfg: ExperimentConfig, out_dir: str | Path | None = None,
                        val_scenes: Sequence[Scene] = ()) -> tuple[Reconstructor, list[tuple]]:
    """Fit the reconstructor on the default context of ``scenes``.

    Returns the model and the loss curve as ``(step, L_R)`` rows.  With an
    ``out_dir`` the curve, a checkpoint every ``checkpoint_every`` epochs and
    a final ``recon`` checkpoint are written there.
    """
    if not scenes:
        raise ContractError("empty training set")
    samples = prepare_recon_samples(scenes, cfg)
    if not samples:
        raise ContractError("no scene has points to reconstruct")
    val = prepare_recon_samples(val_scenes, cfg) if cfg.training.validate else []
    n_app = samples[0].geo.cloud.appearance.shape[1]
    model = Reconstructor(n_app, cfg.model, derive_seed(cfg.seed, "recon-init"))
    opt = Adam(model.parameters(), lr=cfg.training.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve, val_rows = [], []
    step = 0
    for epoch in range(1, cfg.training.recon_epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, "recon-order", epoch)).permutation(len(samples))
        for i in order:
            opt.zero_grad()
            loss = recon_step_loss(model, samples[i], cfg)
            ad.backward(loss)
            opt.step()
            step += 1
            curve.append((step, float(loss.data)))
        if val:
            val_rows.append((epoch, float(np.mean([recon_step_loss(model, s, cfg).data for s in val]))))
        log.info("recon epoch %d: train L_R %.5f", epoch, np.mean([c[1] for c in curve[-len(samples):]]))
        if out is not None and epoch % cfg.training.checkpoint_every == 0:
            save_checkpoint(out / f"recon-epoch{epoch:03d}", model.state_dict(),
                            _manifest(cfg, "reconstructor", epoch, step, n_appearance=n_app))
    if out is not None:
        save_checkpoint(out / "recon", model.state_dict(),
                        _manifest(cfg, "reconstructor", cfg.training.recon_epochs, step, n_appearance=n_app))
        _write_csv(out / "recon_loss.csv", ("step", "L_R"), curve)
        if val_rows:
            _write_csv(out / "recon_val.csv", ("epoch", "L_R"), val_rows)
    return model, curve


def load_reconstructor(stem: str | Path, cfg: ExperimentConfig) -> Reconstructor:
    params, manifest = load_checkpoint(stem)
    if manifest.get("kind") != "reconstructor":
        raise ContractError(f"{stem} is not a reconstructor checkpoint")
    model = Reconstructor(int(manifest["n_appearance"]), cfg.model)
    model.load_state_dict(params)
    return model


# ---------------------------------------------------------------------------
# detector


@dataclass
class DetectSample:
    geo: SceneGeometry
    inputs: np.ndarray
    anomaly: np.ndarray
    semantic: np.ndarray


def detector_input(geo: SceneGeometry, cfg: ExperimentConfig, recon: Reconstructor | None) -> np.ndarray:
    """Backbone input: the reconstruction delta, or the raw features in raw mode."""
    if cfg.detector_input == "raw":
        return geo.raw
    if recon is None:
        raise ContractError("delta input mode needs a trained reconstructor")
    return geo.delta_features(recon(geo).data)


def augment_scene(cloud: PointCloud, labels: LabelSet, cfg: ExperimentConfig, seed: int,
                  provenance: list | None = None, inject: bool = True) -> Scene:
    """Training-scene preparation: inject synthetic anomalies, then drop held-out ones.

    Held-out anomaly instances are flagged anomalous, so they are never
    picked for injection and the order of the two steps does not matter.
    """
    cm = cfg.classes
    aug = cfg.augmentation
    if inject and aug.mode != "none" and aug.rate > 0 and cfg.anomaly_protocol == "synthetic":
        cloud, labels = inject_synthetic_anomalies(cloud, labels, cm, aug.mode, aug.rate, seed,
                                                   provenance, center=aug.center)
    return mask_known(cloud, labels, cm)


def _sample(cloud, labels, cfg, recon) -> DetectSample:
    cm = cfg.classes
    geo = SceneGeometry(cloud, cfg.model)
    sem = semantic_targets(labels, sorted(cm.known_classes))
    anomaly = np.asarray(labels.anomaly, dtype=bool)
    # any point without a known class is excluded from the semantic loss
    return DetectSample(geo, detector_input(geo, cfg, recon), anomaly | (sem < 0), np.maximum(sem, 0))


def prepare_detect_samples(scenes: Sequence[Scene], cfg: ExperimentConfig, recon: Reconstructor | None,
                           augmented: bool = False) -> list[DetectSample]:
    samples = []
    for idx, (cloud, labels) in enumerate(scenes):
        cloud, labels = augment_scene(cloud, labels, cfg, derive_seed(cfg.seed, "augment", idx),
                                      inject=not augmented)
        if cloud.n:
            samples.append(_sample(cloud, labels, cfg, recon))
    return samples


def new_detector(cfg: ExperimentConfig, n_appearance: int) -> Detector:
    n_in = raw_channels(n_appearance) if cfg.detector_input == "raw" else delta_channels(n_appearance)
    return Detector(n_in, raw_channels(n_appearance), cfg.classes.k, cfg.model,
                    derive_seed(cfg.seed, "detect-init"))


def train_detector(scenes: Sequence[Scene], cfg: ExperimentConfig, recon: Reconstructor | None = None,
                   out_dir: str | Path | None = None, val_scenes: Sequence[Scene] = (),
                   augmented: bool = False) -> tuple[Detector, list[tuple]]:
    """Fit the dual-head detector.

    Scenes go through :func:`augment_scene`; with ``augmented`` set the
    injection step is skipped because it already happened on disk.  The loss curve rows are
    ``(step, L, L_A, L_C)``.
    """
    if not scenes:
        raise ContractError("empty training set")
    if cfg.detector_input == "delta" and recon is None:
        raise ContractError("delta input mode needs a trained reconstructor")
    samples = prepare_detect_samples(scenes, cfg, recon, augmented)
    if not samples:
        raise ContractError("no usable training scene")
    n_app = samples[0].geo.cloud.appearance.shape[1]
    model = new_detector(cfg, n_app)
    opt = Adam(model.parameters(), lr=cfg.training.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve, val_rows = [], []
    step = 0
    for epoch in range(1, cfg.training.detect_epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, "detect-order", epoch)).permutation(len(samples))
        for i in order:
            s = samples[i]
            opt.zero_grad()
            A, C = model(s.inputs, s.geo.raw, s.geo)
            L, la, lc = total_loss(A, C, s.anomaly, s.semantic)
            ad.backward(L)
            opt.step()
            step += 1
            curve.append((step, float(L.data), float(la.data), float(lc.data)))
        if val_scenes and cfg.training.validate:
            rep = evaluate_scenes(model, recon, val_scenes, cfg, strict=False)
            val_rows.append((epoch, rep.auroc, rep.aupr, rep.miou))
        log.info("detect epoch %d: train L %.5f", epoch, np.mean([c[1] for c in curve[-len(samples):]]))
        if out is not None and epoch % cfg.training.checkpoint_every == 0:
            save_checkpoint(out / f"detect-epoch{epoch:03d}", model.state_dict(),
                            _manifest(cfg, "detector", epoch, step, n_appearance=n_app,
                                      detector_input=cfg.detector_input))
    if out is not None:
        save_checkpoint(out / "detect", model.state_dict(),
                        _manifest(cfg, "detector", cfg.training.detect_epochs, step, n_appearance=n_app,
                                  detector_input=cfg.detector_input))
        _write_csv(out / "detect_loss.csv", ("step", "L", "L_A", "L_C"), curve)
        if val_rows:
            _write_csv(out / "detect_val.csv", ("epoch", "auroc", "aupr", "miou"), val_rows)
    return model, curve


def load_detector(stem: str | Path, cfg: ExperimentConfig) -> Detector:
    params, manifest = load_checkpoint(stem)
    if manifest.get("kind") != "detector":
        raise ContractError(f"{stem} is not a detector checkpoint")
    if manifest.get("detector_input", cfg.detector_input) != cfg.detector_input:
        raise ContractError("checkpoint was trained with a different detector input mode")
    model = new_detector(cfg, int(manifest["n_appearance"]))
    model.load_state_dict(params)
    return model


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(detector: Detector, recon: Reconstructor | None, cloud: PointCloud,
            cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Anomaly scores (N,) and predicted known-class ids (N,) for one scene."""
    geo = SceneGeometry(cloud, cfg.model)
    A, C = detector(detector_input(geo, cfg, recon), geo.raw, geo)
    known = np.array(sorted(cfg.classes.known_classes))
    return A.data.copy(), known[np.argmax(C.data, axis=1)]


def _safe(metric, *args) -> float:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return float("nan")


def evaluate_scenes(detector: Detector, recon: Reconstructor | None, scenes: Sequence[Scene],
                    cfg: ExperimentConfig, strict: bool = True) -> EvalReport:
    """Pool per-point predictions over ``scenes`` and score them.

    Anomalies are the configured anomaly classes.  When both train-time and
    held-out anomaly classes occur, AUROC/AUPR are also reported for each
    group against the non-anomalous points.  With ``strict=False`` undefined
    metrics become NaN instead of raising.
    """
    if not scenes:
        raise ContractError("no scenes to evaluate")
    cm = cfg.classes
    scores, preds, gts = [], [], []
    for cloud, labels in scenes:
        A, pred = predict(detector, recon, cloud, cfg)
        scores.append(A)
        preds.append(pred)
        gts.append(labels.semantic)
    s, p, g = np.concatenate(scores), np.concatenate(preds), np.concatenate(gts)
    flags = cm.anomaly_flags(g)
    pick = (lambda f, *a: f(*a)) if strict else _safe
    m = pick(miou, p, g, sorted(cm.known_classes))
    miou_value, per_class = m if isinstance(m, tuple) else (float("nan"), {})
    extra = {"n_points": int(len(s)), "n_anomalous": int(flags.sum()), "n_scenes": len(scenes)}
    groups = {"known": cm.train_anomaly_classes, "unknown": cm.test_anomaly_classes}
    present = {k: np.isin(g, sorted(v)) for k, v in groups.items()}
    if all(mask.any() for mask in present.values()):
        for name, mask in present.items():
            keep = mask | ~flags
            extra[f"auroc_{name}"] = pick(auroc, s[keep], mask[keep])
            extra[f"aupr_{name}"] = pick(aupr, s[keep], mask[keep])
    has_both = flags.any() and (~flags).any()
    return EvalReport(
        auroc=pick(auroc, s, flags),
        aupr=pick(aupr, s, flags),
        miou=miou_value,
        per_class_iou=per_class,
        counts=threshold_sweep(s, flags) if has_both or strict else {},
        extra=extra,
    )


def reconstruction_error_split(recon: Reconstructor, scenes: Sequence[Scene], cfg: ExperimentConfig):
    """Mean per-point delta norm on anomalous vs in-set object points."""
    cm = cfg.classes
    errs = {True: [], False: []}
    for cloud, labels in scenes:
        geo = SceneGeometry(cloud, cfg.model)
        norm = geo.delta_features(recon(geo).data)[:, -1]
        objects = object_mask(labels, cm)
        flags = cm.anomaly_flags(labels.semantic) | labels.anomaly
        errs[True].append(norm[flags])
        errs[False].append(norm[objects & ~flags])
    return float(np.mean(np.concatenate(errs[True]))), float(np.mean(np.concatenate(errs[False])))
