import numpy as np
import pytest

from pcad import config, data
from pcad.errors import ContractError
from pcad.models import Reconstructor, SceneGeometry
from pcad.train import (
    augment_scene,
    derive_seed,
    evaluate_scenes,
    load_detector,
    load_reconstructor,
    object_mask,
    prepare_recon_samples,
    recon_loss_mask,
    recon_step_loss,
    train_detector,
    train_reconstructor,
)

SMALL = dict(widths=(8, 16), d_state=4, head_hidden=16)


def small_cfg(**training):
    t = dict(recon_epochs=1, detect_epochs=1, validate=False)
    t.update(training)
    return config.toy_config(**SMALL, training=config.TrainingConfig(**t))


@pytest.fixture(scope="module")
def scenes():
    cm = config.toy_config().classes
    return [data.generate_synthetic_scene(i, class_map=cm) for i in range(4)]


def test_derive_seed_is_stable():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert derive_seed(0, "a", 1) != derive_seed(0, "a", 2)
    assert 0 <= derive_seed(5) < 2**63


def test_empty_training_sets():
    cfg = small_cfg()
    with pytest.raises(ContractError):
        train_reconstructor([], cfg)
    with pytest.raises(ContractError):
        train_detector([], cfg.replace(detector_input="raw"))


def test_delta_detector_needs_reconstructor(scenes):
    with pytest.raises(ContractError):
        train_detector(scenes, small_cfg())


def test_loss_masks(scenes):
    cm = config.toy_config().classes
    cloud, labels = data.mask_default(*scenes[0], cm)
    assert recon_loss_mask(labels, cm, "scene") is None
    mask = recon_loss_mask(labels, cm, "objects")
    np.testing.assert_array_equal(mask, object_mask(labels, cm))
    assert mask.any() and not mask.all()
    assert not np.isin(labels.semantic[mask], sorted(cm.surface_classes)).any()
    with pytest.raises(ContractError):
        recon_loss_mask(labels, cm, "walls")


def test_modes_share_step_zero_forward(scenes):
    objects = small_cfg().replace(recon_mode="objects")
    whole = small_cfg().replace(recon_mode="scene")
    a, b = prepare_recon_samples(scenes, objects), prepare_recon_samples(scenes, whole)
    model_a = Reconstructor(1, objects.model, derive_seed(objects.seed, "recon-init"))
    model_b = Reconstructor(1, whole.model, derive_seed(whole.seed, "recon-init"))
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(model_a(sa.geo).data, model_b(sb.geo).data)
        assert sb.mask is None and sa.mask is not None
    # the losses differ only through the mask
    assert float(recon_step_loss(model_a, a[0], objects).data) != float(recon_step_loss(model_b, b[0], whole).data)


def test_reconstructor_loss_decreases():
    cfg = small_cfg()
    train = [data.generate_synthetic_scene(i, class_map=cfg.classes) for i in range(100)]
    _, curve = train_reconstructor(train, cfg)
    losses = np.array([c[1] for c in curve[:100]])
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]


def test_same_seed_same_checkpoint_bytes(tmp_path, scenes):
    cfg = small_cfg(recon_epochs=2, detect_epochs=1)
    for run in ("a", "b"):
        recon, _ = train_reconstructor(scenes, cfg, tmp_path / run)
        train_detector(scenes, cfg, recon, tmp_path / run)
    for name in ("recon.ckpt", "recon-epoch001.ckpt", "recon_loss.csv", "detect.ckpt", "detect_loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other, _ = train_reconstructor(scenes, cfg.with_seed(1), tmp_path / "c")
    assert (tmp_path / "c" / "recon.ckpt").read_bytes() != (tmp_path / "a" / "recon.ckpt").read_bytes()


def test_checkpoints_reload(tmp_path, scenes):
    cfg = small_cfg()
    recon, _ = train_reconstructor(scenes, cfg, tmp_path)
    det, curve = train_detector(scenes, cfg, recon, tmp_path)
    assert len(curve[0]) == 4
    geo = SceneGeometry(scenes[0][0], cfg.model)
    np.testing.assert_array_equal(load_reconstructor(tmp_path / "recon", cfg)(geo).data, recon(geo).data)
    back = load_detector(tmp_path / "detect", cfg)
    with pytest.raises(ContractError):
        load_detector(tmp_path / "detect", cfg.replace(detector_input="raw"))
    with pytest.raises(ContractError):
        load_reconstructor(tmp_path / "detect", cfg)
    r1 = evaluate_scenes(det, recon, scenes, cfg, strict=False)
    r2 = evaluate_scenes(back, recon, scenes, cfg, strict=False)
    assert r1.to_json() == r2.to_json()


def test_augment_scene_keeps_known_classes(scenes):
    cfg = small_cfg()
    cm = cfg.classes
    prov = []
    cloud, labels = augment_scene(*scenes[1], cfg, seed=3, provenance=prov)
    assert not np.isin(labels.semantic, sorted(cm.test_anomaly_classes)).any()
    assert labels.anomaly.any() == bool(prov)
