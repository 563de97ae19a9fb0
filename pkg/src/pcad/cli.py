"""Command-line entry point: ``pcad <command> [options]``.

Commands write files only.  Exit status is 0 on success, 2 when inputs
violate a contract (bad config, malformed files, missing checkpoint), 3 when
a metric is undefined on the evaluated data, and 1 on I/O failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import inject_synthetic_anomalies
from .checkpoint import canonical_json
from .config import AUG_MODES, DETECTOR_INPUTS, RECON_MODES, ExperimentConfig
from .data import generate_synthetic_scene
from .errors import ContractError, UndefinedMetricError
from .export import label_colors, score_colors, write_ply
from .metrics import write_sweep_csv
from .scene_io import read_scene, write_scene
from .train import (
    derive_seed,
    evaluate_scenes,
    load_detector,
    load_reconstructor,
    predict,
    train_detector,
    train_reconstructor,
)

log = logging.getLogger("pcad")

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# helpers


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def split_counts(m: int, fractions) -> dict[str, int]:
    n_train = int(np.floor(fractions[0] * m + 1e-9))
    n_val = int(np.floor(fractions[1] * m + 1e-9))
    return {"train": n_train, "val": n_val, "test": m - n_train - n_val}


def assign_splits(m: int, fractions, seed: int) -> list[str]:
    counts = split_counts(m, fractions)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(m)
    names = np.empty(m, dtype=object)
    start = 0
    for split in SPLITS:
        names[order[start:start + counts[split]]] = split
        start += counts[split]
    return names.tolist()


def read_manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST
    if not path.exists():
        raise ContractError(f"{data_dir} has no {MANIFEST}")
    return json.loads(path.read_text())


def load_split(data_dir: Path, manifest: dict, split: str):
    """Scenes of one split, in manifest order; other splits are never opened."""
    scenes = []
    for entry in manifest["scenes"]:
        if entry["split"] == split:
            cloud, labels, _ = read_scene(data_dir / entry["name"])
            scenes.append((cloud, labels))
    return scenes


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg = load_config(args)
    out = _mkdir(Path(args.out))
    m = args.n_scenes if args.n_scenes is not None else cfg.dataset.n_scenes
    recipe, cm = cfg.recipe, cfg.classes
    splits = assign_splits(m, cfg.dataset.split, cfg.seed)
    entries = []
    for i in range(m):
        name = f"scene_{i:04d}"
        scene_seed = derive_seed(cfg.seed, "scene", i)
        cloud, labels = generate_synthetic_scene(scene_seed, recipe, cm)
        write_scene(out / name, cloud, labels, {
            "generator": "synthetic", "scene_seed": scene_seed, "index": i,
            "config_hash": cfg.hash(), "seed": cfg.seed,
        })
        entries.append({"name": name, "split": splits[i], "n_points": cloud.n})
    manifest = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "n_scenes": m,
        "split_counts": {s: splits.count(s) for s in SPLITS},
        "scenes": entries,
        "config": cfg.to_dict(),
    }
    (out / MANIFEST).write_text(canonical_json(manifest))
    log.info("wrote %d scenes to %s", m, out)
    return 0


def cmd_augment(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg = replace(cfg, augmentation=replace(cfg.augmentation, mode=args.mode))
    aug = cfg.augmentation
    src, out = Path(args.input), _mkdir(Path(args.out))
    manifest = read_manifest(src)
    cm = cfg.classes
    n_records = 0
    for idx, entry in enumerate(manifest["scenes"]):
        stem = src / entry["name"]
        records: list = []
        if entry["split"] == "train" and aug.mode != "none" and aug.rate > 0:
            cloud, labels, prov = read_scene(stem)
            objects = ~np.isin(labels.semantic, sorted(cm.surface_classes | cm.anomaly_classes))
            if objects.any() and not labels.instance.any():
                raise ContractError(f"{entry['name']}: {aug.mode} augmentation needs instance labels")
            seed = derive_seed(cfg.seed, "augment", idx)
            cloud, labels = inject_synthetic_anomalies(cloud, labels, cm, aug.mode, aug.rate, seed,
                                                       records, center=aug.center)
        if records:
            prov = dict(prov)
            prov["augmentation"] = {
                "mode": aug.mode, "rate": aug.rate, "seed": seed,
                "config_hash": cfg.hash(), "instances": records,
            }
            write_scene(out / entry["name"], cloud, labels, prov)
            n_records += len(records)
        else:
            for suffix in (".pcs", ".json"):
                shutil.copyfile(stem.with_suffix(suffix), (out / entry["name"]).with_suffix(suffix))
    manifest = dict(manifest)
    manifest["augmented"] = {"mode": aug.mode, "rate": aug.rate, "config_hash": cfg.hash(),
                             "seed": cfg.seed, "instances": n_records}
    (out / MANIFEST).write_text(canonical_json(manifest))
    log.info("augmented %d instances", n_records)
    return 0


def cmd_train_recon(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg = replace(cfg, recon_mode=args.mode)
    data = Path(args.data)
    manifest = read_manifest(data)
    train = load_split(data, manifest, "train")
    val = load_split(data, manifest, "val")
    train_reconstructor(train, cfg, _mkdir(Path(args.out)), val)
    return 0


def cmd_train_detect(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg = replace(cfg, detector_input=args.mode)
    if cfg.detector_input == "delta" and not args.recon:
        raise ContractError("delta input mode requires --recon")
    recon = load_reconstructor(args.recon, cfg) if cfg.detector_input == "delta" else None
    data = Path(args.data)
    manifest = read_manifest(data)
    train = load_split(data, manifest, "train")
    val = load_split(data, manifest, "val")
    train_detector(train, cfg, recon, _mkdir(Path(args.out)), val, augmented="augmented" in manifest)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    if args.mode:
        cfg = replace(cfg, detector_input=args.mode)
    data = Path(args.data)
    manifest = read_manifest(data)
    split = args.split
    if split == "train":
        raise ContractError("evaluation never reads the training split")
    names = [e["name"] for e in manifest["scenes"] if e["split"] == split]
    if not names:
        raise ContractError(f"the {split} split is empty")
    recon = load_reconstructor(args.recon, cfg) if args.recon else None
    detector = load_detector(args.detect, cfg)
    scenes = load_split(data, manifest, split)
    report = evaluate_scenes(detector, recon, scenes, cfg)
    report.extra.update({"config_hash": cfg.hash(), "seed": cfg.seed, "split": split})
    out = Path(args.out)
    _mkdir(out.parent)
    report.write(out)
    if args.sweep_csv:
        write_sweep_csv(report.counts, args.sweep_csv)
    if args.scores_dir:
        sdir = _mkdir(Path(args.scores_dir))
        for name, (cloud, _) in zip(names, scenes):
            scores, pred = predict(detector, recon, cloud, cfg)
            np.save(sdir / f"{name}_scores.npy", scores)
            np.save(sdir / f"{name}_pred.npy", pred)
    log.info("AUROC %.4f AUPR %.4f mIoU %.4f", report.auroc, report.aupr, report.miou)
    return 0


def cmd_export_ply(args) -> int:
    cloud, labels, prov = read_scene(args.scene)
    mode = args.mode or ("score" if args.scores else "label")
    if mode == "score":
        if not args.scores:
            raise ContractError("score mode needs --scores")
        scores = np.load(args.scores) if args.scores.endswith(".npy") else np.loadtxt(args.scores, ndmin=1)
        if len(scores) != cloud.n:
            raise ContractError(f"{len(scores)} scores for {cloud.n} points")
        colors = score_colors(scores)
    elif mode == "label":
        colors = label_colors(labels.semantic, labels.anomaly)
    else:
        raise ContractError(f"unknown export mode {mode!r}")
    comments = [f"mode {mode}"]
    if "config_hash" in prov:
        comments.append(f"config_hash {prov['config_hash']} seed {prov.get('seed')}")
    out = Path(args.out)
    _mkdir(out.parent)
    write_ply(out, cloud.positions, colors, comments)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcad", description="Reconstruction-based open-set segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, modes=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True)
        p.add_argument("--mode", choices=modes, help="command-specific mode switch")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate a synthetic scene dataset")
    p.add_argument("--n-scenes", type=int)
    p = add("augment", cmd_augment, "inject synthetic anomalies into training scenes", AUG_MODES)
    p.add_argument("--in", dest="input", required=True)
    p = add("train-recon", cmd_train_recon, "train the scene reconstructor", RECON_MODES)
    p.add_argument("--data", required=True)
    p = add("train-detect", cmd_train_detect, "train the open-set detector", DETECTOR_INPUTS)
    p.add_argument("--data", required=True)
    p.add_argument("--recon", help="reconstructor checkpoint stem (delta mode)")
    p = add("evaluate", cmd_evaluate, "score a detector on the test split", DETECTOR_INPUTS)
    p.add_argument("--data", required=True)
    p.add_argument("--detect", required=True)
    p.add_argument("--recon")
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--sweep-csv")
    p.add_argument("--scores-dir")
    p = add("export-ply", cmd_export_ply, "write a coloured ASCII PLY", ("score", "label"))
    p.add_argument("--scene", required=True)
    p.add_argument("--scores")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyError, json.JSONDecodeError) as exc:
        print(f"error: malformed input ({exc})", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
