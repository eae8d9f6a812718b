import math

import numpy as np
import pytest

import xwin


def small_config():
    cfg = xwin.Config()
    for kv in [
        "model.image_size=16", "model.patch_size=8", "model.embed_dim=16", "model.encoder_depth=1",
        "model.num_heads=2", "model.mlp_ratio=2", "model.predictor_dim=8", "model.predictor_depth=1",
        "model.classifier_depth=1", "data.volume_grid=16", "data.volume_spacing=16", "rig.nu=16",
        "rig.nv=16", "rig.pitch=32", "rig.step_mm=8", "action.n_views=4", "train.batch_volumes=2",
        "data.num_phantoms=4", "data.num_real=4", "train.epochs=2", "train.iters_per_epoch=10",
        "mask.scale_min=0.25", "mask.scale_max=0.25", "mask.min_ratio=0.25", "mask.max_ratio=0.75",
    ]:
        cfg.apply_override(kv)
    return cfg


def test_config_defaults_and_round_trip():
    cfg = xwin.Config()
    assert float(cfg.get("loss.lambda_affinity")) == 0.4
    assert float(cfg.get("loss.lambda_domain")) == 0.6
    again = xwin.Config.parse(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    with pytest.raises(xwin.Error):
        cfg.apply_override("no.such.key=1")


def test_phantom_labels_and_determinism():
    cfg = small_config()
    a = xwin.phantom(cfg, 5)
    b = xwin.phantom(cfg, 5)
    assert a["volume"].shape == (16, 16, 16)
    assert a["volume"].dtype == np.float32
    assert a["checksum"] == b["checksum"]
    assert np.array_equal(a["volume"], b["volume"])
    assert set(a["labels"]) == {"lesion_present", "lesion_count_ge2", "largest_on_left"}


def test_render_cylinder_chord():
    vol = xwin.cylinder(32, 4.0, 40.0, 0.02)
    g = xwin.Geometry()
    g.nu = g.nv = 32
    g.pitch = 8.0
    g.beta = 30.0
    spacing = [4.0, 4.0, 4.0]
    fast = xwin.render_drr(vol, spacing, g, step_mm=2.0)
    exact = xwin.render_drr(vol, spacing, g, exact=True)
    assert fast.shape == (32, 32)
    # The central ray crosses the cylinder along a diameter (80 mm).
    centre = fast[15:17, 15:17].mean()
    assert centre == pytest.approx(1.6, rel=0.03)
    assert exact[15:17, 15:17].mean() == pytest.approx(1.6, rel=0.03)
    same = xwin.render_drr(vol, spacing, g, step_mm=2.0)
    assert np.array_equal(fast, same)


def test_loss_identities():
    for n in (2, 4, 8):
        p = np.full((n, n), 1.0 / n)
        assert abs(xwin.infonce(p) - math.log(n)) < 1e-9
    rng = np.random.default_rng(0)
    p = xwin.softmax_rows(rng.normal(size=(4, 4)), 0.5)
    assert xwin.affinity_loss(np.eye(4), p) == xwin.infonce(p)


def test_metrics():
    assert xwin.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert xwin.auroc([0.5] * 4, [0, 0, 1, 1]) == 0.5
    a = np.linspace(0, 1, 100).reshape(10, 10)
    assert xwin.psnr(a, a, 1.0) == 99.0
    assert xwin.ssim(a, a, 1.0) == pytest.approx(1.0)
    assert xwin.codebook_usage([3, 3, 3], 4) == 0.25
    cb = np.eye(3)
    assert xwin.nearest_indices(np.array([[0.9, 0.1, 0.0], [0.0, 0.0, 2.0]]), cb) == [0, 2]


def test_fdk_zero_and_linearity():
    g = []
    projs = []
    rng = np.random.default_rng(1)
    for i in range(12):
        geo = xwin.Geometry()
        geo.nu = geo.nv = 16
        geo.pitch = 16.0
        geo.beta = 30.0 * i
        g.append(geo)
        projs.append(rng.random((16, 16)).astype(np.float32))
    zero = xwin.fdk([np.zeros((16, 16), np.float32)] * 12, g, [8, 8, 8], [8.0, 8.0, 8.0])
    assert not zero.any()
    one = xwin.fdk(projs, g, [8, 8, 8], [8.0, 8.0, 8.0])
    assert one.shape == (8, 8, 8)


def test_trainer_steps_and_resume(tmp_path):
    cfg = small_config()
    t = xwin.Trainer(cfg)
    logs = t.run(2)
    assert [r["step"] for r in logs] == [0, 1]
    assert all(math.isfinite(r["overall"]) for r in logs)
    path = str(tmp_path / "ck.bin")
    t.save_checkpoint(path)
    resumed = xwin.Trainer.from_checkpoint(path)
    assert resumed.step_count == 2
    assert resumed.step()["overall"] == t.step()["overall"]
