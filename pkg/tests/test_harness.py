import json

import numpy as np
import pytest

from sparsevox import costmodel as cm
from sparsevox.harness import RunConfig, gen_scene, run_pipeline, train_toy
from sparsevox.harness.cli import main
from sparsevox.harness.pipeline import Model, backward
from sparsevox.harness.scene import SyntheticScene, render_depth
from sparsevox.voxcore import RngStream, load_array

SMALL = RunConfig(dims=(8, 8, 4), channels=6, heads=2, points=2, token_dim=4, classifier_width=4,
                  image_width=24, image_height=12, depth_bins=8)


def test_config_roundtrip(tmp_path):
    cfg = RunConfig(dims=(8, 6, 2), lr=0.5, use_layer_norm=False)
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg


def test_config_errors():
    with pytest.raises(ValueError):
        RunConfig.from_text("nonsense=1\n")
    with pytest.raises(ValueError):
        RunConfig.from_text("steps=0\n")
    with pytest.raises(ValueError):
        RunConfig(dropout_p=2.0)
    assert RunConfig.from_text("# comment\nseed=4\n").seed == 4


def test_scene_deterministic():
    a, b = gen_scene(SMALL, RngStream(5)), gen_scene(SMALL, RngStream(5))
    assert np.array_equal(a.labels.labels, b.labels.labels)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.depth, b.depth)
    c = gen_scene(SMALL, RngStream(6))
    assert not np.array_equal(a.features, c.features)


def test_box_density_zero_ground_only():
    s = gen_scene(RunConfig(box_density=0.0), RngStream(1))
    lab = s.labels.labels
    tab = s.labels.class_table
    assert all(tab.is_background(k) for k in s.labels.present() if k != 0)
    assert np.all(lab[..., 1:] == 0)
    assert (lab != 0).sum() == round(0.07 * lab.size)


def test_occupancy_fraction_over_many_scenes():
    cfg = RunConfig()
    fr = [gen_scene(cfg, RngStream(s)).occupancy_fraction for s in range(100)]
    assert all(0.05 <= f <= 0.09 for f in fr)


def _march(labels, spec, cam, u, v, step):
    d_cam = np.linalg.inv(cam.K) @ np.array([u, v, 1.0])
    d = cam.R.T @ d_cam
    o = cam.center()
    for t in np.arange(0.0, 20.0, step):
        p = o + t * d
        idx = np.floor((p - np.asarray(spec.origin)) / spec.voxel_size).astype(int)
        if np.all(idx >= 0) and np.all(idx < spec.dims) and labels[tuple(idx)] != 0:
            return np.ravel_multi_index(tuple(idx), spec.dims), t
    return -1, np.inf


def test_depth_consistent_with_labels():
    s = gen_scene(SMALL, RngStream(3))
    depth, hit = render_depth(s.labels.labels, s.spec, s.camera)
    assert np.array_equal(depth, s.depth)
    step = 2e-3
    for v in range(0, s.camera.height, 3):
        for u in range(0, s.camera.width, 3):
            h, t = _march(s.labels.labels, s.spec, s.camera, u, v, step)
            assert h == hit[v, u]
            assert h == -1 or abs(t - depth[v, u]) <= step + 1e-9


def test_scene_save_load(tmp_path):
    s = gen_scene(SMALL, RngStream(2))
    s.save(tmp_path / "sc")
    b = SyntheticScene.load(tmp_path / "sc")
    assert np.array_equal(b.labels.labels, s.labels.labels)
    assert np.array_equal(b.features, s.features) and np.array_equal(b.depth, s.depth)
    assert b.labels.class_table == s.labels.class_table
    assert load_array(tmp_path / "sc" / "labels.vxg").shape == SMALL.dims


def test_degenerate_pipeline_runs():
    cfg = RunConfig(dropout_p=0.0)
    scene = gen_scene(cfg, RngStream(0))
    model = Model(cfg)
    model.dsfr.off_w.value[...] = 0.0
    model.dsfr.off_b.value[...] = 0.0
    model.dsfr.theta.value[...] = -5.0
    res = run_pipeline(scene, model, cfg)
    assert res.pred.shape == cfg.dims and np.isfinite(res.report.l_total)
    assert res.inst.n_refined > 0


def test_oracle_logits_give_perfect_miou():
    cfg = SMALL.replace(dropout_p=0.0)
    scene = gen_scene(cfg, RngStream(0))
    oracle = np.eye(cfg.n_classes)[scene.labels.labels.ravel()] * 50.0
    res = run_pipeline(scene, Model(cfg), cfg, inject_logits=oracle)
    assert res.metrics["miou"] == 1.0 and res.metrics["iou"] == 1.0


def test_seed11_identities_and_instrumentation():
    cfg = RunConfig(seed=11)
    scene = gen_scene(cfg, RngStream(11))
    model = Model(cfg)
    model.dsfr.theta.value[...] = -3.0
    res = run_pipeline(scene, model, cfg)
    assert res.report.check_identities()
    base = cm.CostConfig(dims=cfg.dims, channels=cfg.channels, heads=cfg.heads, points=cfg.points)
    ok, _ = cm.verify_against_instrumentation(cm.cost(cm.config_from_instrumentation(base, res.inst)), res.inst)
    assert ok and res.inst.sample_calls > 0


def test_end_to_end_deterministic():
    a = run_pipeline(gen_scene(SMALL), Model(SMALL), SMALL)
    b = run_pipeline(gen_scene(SMALL), Model(SMALL), SMALL)
    assert np.array_equal(a.logits, b.logits)
    assert a.report.to_dict() == b.report.to_dict() and a.inst == b.inst


def test_dense_matches_sparse_at_init():
    cfg = SMALL
    scene = gen_scene(cfg)
    model = Model(cfg)
    model.dsfr.theta.value[...] = -3.0
    sp = run_pipeline(scene, model, cfg, RngStream(1))
    de = run_pipeline(scene, model, cfg, RngStream(1), mode="dense")
    r = sp.occ.mask_occ.ravel() & np.isfinite(sp.logits).all(axis=1)
    cache = sp.cache["dcache"]["r"]
    assert cache.size > 0
    assert np.array_equal(sp.logits[cache], de.logits[cache])
    assert np.array_equal(sp.pred.labels.ravel()[cache], de.pred.labels.ravel()[cache])
    assert r.sum() >= cache.size


def test_pipeline_gradient_spot_check():
    cfg = SMALL.replace(dropout_p=0.0)
    scene = gen_scene(cfg, RngStream(4))
    model = Model(cfg)
    model.dsfr.theta.value[...] = -2.0
    model.tgif.wo.value[...] = RngStream(8).normal(scale=0.2, size=model.tgif.wo.shape)
    # zero-feature voxels put h = b1 exactly on the ReLU hinge while b1 = 0
    model.dsfr.cls_b1.value[...] = RngStream(9).normal(scale=0.1, size=model.dsfr.cls_b1.shape)
    res = run_pipeline(scene, model, cfg, RngStream(0))
    model.store.zero_grad()
    backward(model, res)
    r = np.random.default_rng(0)
    h = 1e-5
    for p in model.parameters():
        for _ in range(3):
            i = tuple(int(r.integers(0, n)) for n in p.shape)
            a = p.grad[i]
            orig = p.value[i]
            p.value[i] = orig + h
            lp = run_pipeline(scene, model, cfg, RngStream(0)).report.l_total
            p.value[i] = orig - h
            lm = run_pipeline(scene, model, cfg, RngStream(0)).report.l_total
            p.value[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(a - fd) / max(1.0, abs(a)) < 1e-4, (p.name, i, a, fd)


def test_lr_zero_constant_loss():
    cfg = SMALL.replace(lr=0.0, steps=5, dropout_p=0.0)
    curve = train_toy(cfg)
    assert len(set(curve.l_total)) == 1 and len(curve.records) == 6


def test_divergence_aborts_with_finite_state():
    cfg = SMALL.replace(lr=1e12, steps=20)
    model = Model(cfg)
    curve = train_toy(cfg, model=model)
    assert curve.aborted
    assert all(np.all(np.isfinite(p.value)) for p in model.parameters())


def test_training_reduces_loss_small():
    curve = train_toy(SMALL.replace(steps=60))
    assert curve.l_total[-1] < curve.l_total[0]
    assert json.loads(curve.to_json())["records"][0]["step"] == 0


def test_cli_roundtrip(tmp_path, capsys):
    cfgp = tmp_path / "run.txt"
    SMALL.replace(steps=3).save(cfgp)
    assert main(["gen-scene", "--seed", "3", "--out", str(tmp_path / "sc"), "--config", str(cfgp)]) == 0
    assert main(["run-pipeline", "--scene", str(tmp_path / "sc"), "--report", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["identities_hold"] and rep["cost_check"]["ok"]
    assert main(["train-toy", "--config", str(cfgp), "--curve-out", str(tmp_path / "curve.json")]) == 0
    assert len(json.loads((tmp_path / "curve.json").read_text())["records"]) == 4
    capsys.readouterr()
    assert main(["cost-report", "--strategy", "dense"]) == 0
    assert json.loads(capsys.readouterr().out)["strategy"] == "dense"
    assert main(["grad-check", "--op", "softmax"]) == 0
    assert json.loads(capsys.readouterr().out)["softmax"]["pass"]
    assert main(["grad-check", "--op", "missing"]) == 2
