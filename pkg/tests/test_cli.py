import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from pcad import config
from pcad.autodiff import Tensor
from pcad.cli import main
from pcad.data import ClassMap, LabelSet, PrimitiveSpec, SceneRecipe, default_recipe
from pcad.scene_io import read_scene, write_scene
from pcad.train import evaluate_scenes


def small_config(**changes) -> dict:
    recipe = default_recipe().to_dict()
    recipe.update(n_points=[600, 700], extent=12.0)
    for p in recipe["primitives"]:
        if p["anomaly"]:
            p["count"] = [1, 1]
    doc = {
        "seed": 7,
        "dataset": {"n_scenes": 10, "recipe": recipe},
        "widths": [4, 8], "d_state": 3, "blocks_per_stage": 1, "head_hidden": 8, "depth": 5,
        "training": {"recon_epochs": 1, "detect_epochs": 1},
    }
    doc.update(changes)
    return doc


def run(*args) -> int:
    return main([str(a) for a in args])


def pipeline(root: Path, cfg_path: Path) -> Path:
    assert run("synth-data", "--config", cfg_path, "--out", root / "data") == 0
    assert run("augment", "--config", cfg_path, "--in", root / "data", "--out", root / "aug") == 0
    assert run("train-recon", "--config", cfg_path, "--data", root / "data", "--out", root / "recon") == 0
    assert run("train-detect", "--config", cfg_path, "--data", root / "aug", "--recon", root / "recon" / "recon",
               "--out", root / "det") == 0
    assert run("evaluate", "--config", cfg_path, "--data", root / "data", "--recon", root / "recon" / "recon",
               "--detect", root / "det" / "detect", "--out", root / "report.json",
               "--sweep-csv", root / "sweep.csv", "--scores-dir", root / "scores") == 0
    return root


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(small_config()))
    return path


@pytest.fixture(scope="module")
def runs(tmp_path_factory, cfg_path):
    base = tmp_path_factory.mktemp("runs")
    return pipeline(base / "a", cfg_path), pipeline(base / "b", cfg_path)


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_reruns_are_byte_identical(runs):
    a, b = (_tree(r) for r in runs)
    assert a.keys() == b.keys() and len(a) > 30
    for name in a:
        assert a[name] == b[name], name


def test_synth_manifest(runs):
    manifest = json.loads((runs[0] / "data" / "manifest.json").read_text())
    assert len(list((runs[0] / "data").glob("scene_*.pcs"))) == 10
    assert sum(manifest["split_counts"].values()) == 10
    assert manifest["split_counts"] == {"train": 7, "val": 1, "test": 2}
    assert manifest["config_hash"] == config.ExperimentConfig.from_dict(small_config()).hash()


def test_augment_touches_only_training_scenes(runs):
    root = runs[0]
    manifest = json.loads((root / "aug" / "manifest.json").read_text())
    assert manifest["augmented"]["instances"] > 0
    for entry in manifest["scenes"]:
        src = (root / "data" / entry["name"]).with_suffix(".pcs").read_bytes()
        dst = (root / "aug" / entry["name"]).with_suffix(".pcs").read_bytes()
        if entry["split"] != "train":
            assert src == dst
    changed = [e for e in manifest["scenes"]
               if "augmentation" in read_scene(root / "aug" / e["name"])[2]]
    assert changed and all(e["split"] == "train" for e in changed)


def test_artifacts_carry_config_hash(runs):
    root = runs[0]
    h = config.ExperimentConfig.from_dict(small_config()).hash()
    report = json.loads((root / "report.json").read_text())
    assert report["extra"]["config_hash"] == h and report["extra"]["seed"] == 7
    assert "miou" in report
    for meta in ("recon/recon.json", "det/detect.json"):
        assert json.loads((root / meta).read_text())["config_hash"] == h
    assert read_scene(root / "data" / "scene_0000")[2]["config_hash"] == h
    assert (root / "recon" / "recon_loss.csv").exists() and (root / "det" / "detect_loss.csv").exists()


def test_rate_zero_copies_bytes(tmp_path, runs):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small_config(augmentation={"rate": 0.0})))
    assert run("augment", "--config", cfg, "--in", runs[0] / "data", "--out", tmp_path / "aug") == 0
    for src in (runs[0] / "data").glob("scene_*"):
        assert src.read_bytes() == (tmp_path / "aug" / src.name).read_bytes()


def test_evaluate_never_opens_training_scenes(tmp_path, runs, cfg_path):
    data = tmp_path / "data"
    shutil.copytree(runs[0] / "data", data)
    manifest = json.loads((data / "manifest.json").read_text())
    for e in manifest["scenes"]:
        if e["split"] == "train":
            (data / e["name"]).with_suffix(".pcs").unlink()
    root = runs[0]
    assert run("evaluate", "--config", cfg_path, "--data", data, "--recon", root / "recon" / "recon",
               "--detect", root / "det" / "detect", "--out", tmp_path / "r.json") == 0
    assert (tmp_path / "r.json").read_bytes() == (root / "report.json").read_bytes()
    assert run("evaluate", "--config", cfg_path, "--data", data, "--split", "val", "--recon",
               root / "recon" / "recon", "--detect", root / "det" / "detect", "--out", tmp_path / "v.json") in (0, 3)


def test_exit_codes(tmp_path, runs, cfg_path):
    root = runs[0]
    assert run("train-detect", "--config", cfg_path, "--data", root / "data", "--out", tmp_path / "d") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"recon_mode": "walls"}')
    assert run("synth-data", "--config", bad, "--out", tmp_path / "x") == 2
    bad.write_text("{oops")
    assert run("synth-data", "--config", bad, "--out", tmp_path / "x") == 2
    assert run("evaluate", "--config", cfg_path, "--data", tmp_path / "nowhere", "--detect", "x",
               "--out", tmp_path / "r.json") == 2
    assert run("evaluate", "--config", cfg_path, "--data", root / "data", "--detect", tmp_path / "missing",
               "--out", tmp_path / "r.json") == 1
    with pytest.raises(SystemExit):
        run("no-such-command")


def test_missing_instance_labels_rejected(tmp_path):
    recipe = SceneRecipe((PrimitiveSpec("ground", 0), PrimitiveSpec("box", 1, (2, 2), (1.5, 2.0))),
                         n_points=(300, 300), extent=10.0).to_dict()
    doc = small_config(dataset={"n_scenes": 3, "split": [1.0, 0.0, 0.0], "recipe": recipe},
                       class_map=ClassMap({0, 1}, surface_classes={0}).to_dict())
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert run("synth-data", "--config", cfg, "--out", tmp_path / "data") == 0
    # rewrite the scenes with every instance id cleared
    for pcs in (tmp_path / "data").glob("*.pcs"):
        cloud, labels, prov = read_scene(pcs.with_suffix(""))
        write_scene(pcs.with_suffix(""), cloud, LabelSet(labels.semantic, np.zeros(cloud.n), labels.anomaly), prov)
    assert run("augment", "--config", cfg, "--in", tmp_path / "data", "--out", tmp_path / "aug") == 2
    # with instance ids, rate 1 perturbs every eligible box
    assert run("synth-data", "--config", cfg, "--out", tmp_path / "data2") == 0
    cfg.write_text(json.dumps({**doc, "augmentation": {"rate": 1.0}}))
    assert run("augment", "--config", cfg, "--in", tmp_path / "data2", "--out", tmp_path / "aug2") == 0
    for pcs in (tmp_path / "aug2").glob("*.pcs"):
        _, labels, prov = read_scene(pcs.with_suffix(""))
        n_boxes = len(set(labels.instance[labels.instance > 0].tolist()))
        assert len(prov["augmentation"]["instances"]) == n_boxes == 2


def test_export_ply(tmp_path, runs):
    root = runs[0]
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    name = next(e["name"] for e in manifest["scenes"] if e["split"] == "test")
    scene = root / "data" / name
    out = tmp_path / "s.ply"
    assert run("export-ply", "--scene", scene, "--scores", root / "scores" / f"{name}_scores.npy", "--out", out) == 0
    lines = out.read_text().splitlines()
    cloud, labels, _ = read_scene(scene)
    assert f"element vertex {cloud.n}" in lines
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == cloud.n
    assert any(line.startswith("comment config_hash") for line in lines)
    assert run("export-ply", "--scene", scene, "--mode", "label", "--out", tmp_path / "l.ply") == 0
    bad = tmp_path / "bad.npy"
    np.save(bad, np.zeros(3))
    assert run("export-ply", "--scene", scene, "--scores", bad, "--out", tmp_path / "x.ply") == 2


def test_ply_ramp_endpoints(tmp_path):
    from pcad.export import ply_text, score_colors

    np.testing.assert_array_equal(score_colors([0.0, 1.0]), [[0, 0, 255], [255, 0, 0]])
    text = ply_text(np.zeros((1, 3)), score_colors([0.0]))
    assert text.splitlines()[-1].endswith("0 0 255")


def test_known_and_unknown_reported_separately(tmp_path):
    """Two anomaly classes: one seen during training, one held out."""
    doc = small_config(
        class_map={"known_classes": [0, 1, 2, 3], "train_anomaly_classes": [4],
                   "test_anomaly_classes": [5], "surface_classes": [0]},
        anomaly_protocol="train_classes", detector_input="raw",
    )
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    assert run("synth-data", "--config", cfg, "--out", tmp_path / "data") == 0
    assert run("train-detect", "--config", cfg, "--data", tmp_path / "data", "--out", tmp_path / "det") == 0
    assert run("evaluate", "--config", cfg, "--data", tmp_path / "data", "--detect", tmp_path / "det" / "detect",
               "--out", tmp_path / "r.json") == 0
    extra = json.loads((tmp_path / "r.json").read_text())["extra"]
    for key in ("auroc_known", "auroc_unknown", "aupr_known", "aupr_unknown"):
        assert 0.0 <= extra[key] <= 1.0


class OracleDetector:
    """Stub whose anomaly score is the groundtruth flag."""

    def __init__(self, truth, k):
        self.truth, self.k = truth, k

    def __call__(self, inputs, raw, geo):
        flags = self.truth[id(geo.cloud)]
        return Tensor(flags.astype(float)), Tensor(np.zeros((geo.n_points, self.k)))


def test_oracle_detector_scores_one():
    from pcad.data import generate_synthetic_scene

    cfg = config.toy_config(detector_input="raw")
    scenes = [generate_synthetic_scene(s, class_map=cfg.classes) for s in range(6)]
    truth = {id(c): l.anomaly for c, l in scenes}
    assert any(t.any() for t in truth.values())
    report = evaluate_scenes(OracleDetector(truth, cfg.classes.k), None, scenes, cfg)
    assert report.auroc == 1.0 and report.aupr == 1.0
