import numpy as np
import pytest

from sparsevox import dsfr as D
from sparsevox.camera import CameraModel, VoxelGridSpec, project_grid
from sparsevox.lift3d import FeatureVolume
from sparsevox.voxcore import InvalidShape, ParameterStore, RngStream, sigmoid


def params(C=4, H=2, S=3, seed=0):
    return D.DsfrParams(ParameterStore(RngStream(seed)), C, heads=H, points=S)


def scene(seed, dims=(8, 8, 4), C=4):
    r = np.random.default_rng(seed)
    spec = VoxelGridSpec(dims, (-0.8, 0.0, 0.0), 0.2)
    cam = CameraModel.looking_at((0, -1.2, 1.4), (0, 0.8, 0), 16, 16, 11.5, 7.5, 24, 16)
    F = r.normal(size=dims + (C,))
    return FeatureVolume(F, np.ones(dims, bool)), project_grid(spec, cam), r.normal(size=(16, 24, C))


@pytest.mark.parametrize("theta", [-20, -5, 0, 5, 20])
def test_threshold_law(theta):
    tau = D.threshold(theta)
    assert abs(tau - (0.2 + 0.8 / (1 + np.exp(-theta)))) < 1e-12
    assert 0.2 <= tau <= 1.0


def test_threshold_monotone():
    th = np.linspace(-30, 30, 301)
    tau = D.threshold(th)
    assert np.all(np.diff(tau) >= 0) and abs(D.threshold(0.0) - 0.6) < 1e-15
    assert D.threshold(-20) == pytest.approx(0.2, abs=1e-8) and D.threshold(20) == pytest.approx(1.0, abs=1e-8)


def test_zero_classifier_all_empty():
    p = params()
    for q in (p.cls_w1, p.cls_w2):
        q.value[...] = 0
    occ = D.classify_occupancy(np.random.default_rng(0).normal(size=(3, 3, 2, 4)), p)
    assert np.all(occ.prob == 0.5) and abs(occ.tau - 0.6) < 1e-15 and not occ.mask_occ.any()
    assert np.array_equal(occ.mask_empty, ~occ.mask_occ)


def test_classifier_channel_mismatch():
    with pytest.raises(InvalidShape):
        D.classify_occupancy(np.zeros((2, 2, 2, 3)), params())


def test_conv3d_against_loops():
    r = np.random.default_rng(1)
    F = r.normal(size=(3, 4, 2, 2))
    w = r.normal(size=(3, 3, 3, 2, 3))
    b = r.normal(size=3)
    out = D.conv3d(F, w, b)
    ref = np.zeros((3, 4, 2, 3))
    for x, y, z in np.ndindex(3, 4, 2):
        acc = b.copy()
        for i, j, k in np.ndindex(3, 3, 3):
            xx, yy, zz = x + i - 1, y + j - 1, z + k - 1
            if 0 <= xx < 3 and 0 <= yy < 4 and 0 <= zz < 2:
                acc += F[xx, yy, zz] @ w[i, j, k]
        ref[x, y, z] = acc
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_blend_examples():
    F = np.full((1, 3), 2.0)
    em = np.full(3, 4.0)
    assert np.array_equal(D.blend(F, np.array([0.5]), em), np.full((1, 3), 3.0))
    assert np.array_equal(D.blend(F, np.array([0.0]), em), em[None])
    assert np.array_equal(D.blend(F, np.array([1.0]), em), F)


def test_refine_empty_touches_only_empty():
    r = np.random.default_rng(2)
    F = FeatureVolume(r.normal(size=(3, 3, 2, 4)), np.ones((3, 3, 2), bool))
    occ = D.OccupancyField.from_prob(r.random((3, 3, 2)), 0.6)
    em = r.normal(size=4)
    out = D.refine_empty(F, occ, em).features
    assert np.array_equal(out[occ.mask_occ], F.features[occ.mask_occ])
    p = occ.prob[occ.mask_empty][:, None]
    np.testing.assert_allclose(out[occ.mask_empty], F.features[occ.mask_empty] * p + em * (1 - p), atol=1e-15)


def test_grid_sample_examples():
    r = np.random.default_rng(3)
    fm = r.normal(size=(4, 5, 2))
    out = D.grid_sample(fm, [[2, 1], [1.5, 3], [-10, -10]])
    assert np.array_equal(out[0], fm[1, 2])
    np.testing.assert_allclose(out[1], 0.5 * (fm[3, 1] + fm[3, 2]), atol=1e-15)
    assert np.all(out[2] == 0)


def test_normalisation_roundtrip():
    gx, gy = D.normalize_points(np.array([0.0, 4.0]), np.array([0.0, 3.0]), 5, 4)
    assert np.array_equal(gx, [-1, 1]) and np.array_equal(gy, [-1, 1])
    u, v = D.denormalize_points(gx, gy, 5, 4)
    assert np.array_equal(u, [0, 4]) and np.array_equal(v, [0, 3])


def test_single_point_degenerate():
    p = params(H=1, S=1)
    r = np.random.default_rng(4)
    x = r.normal(size=(5, 4))
    fm = r.normal(size=(10, 12, 4))
    u, v = r.uniform(2, 9, 5), r.uniform(2, 7, 5)
    out, cache = D.refine_rows(x, u, v, fm, p)
    assert np.all(cache["att"] == 1.0)
    off = cache["off"][:, 0, 0]
    s = D.grid_sample(fm, np.stack([u + off[:, 0], v + off[:, 1]], axis=1))
    g = s @ p.red_w.value + p.red_b.value
    ref = np.concatenate([x, g], axis=1) @ p.fuse_w.value + p.fuse_b.value
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_zero_offsets_sample_own_projection():
    p = params()
    p.off_w.value[...] = 0
    r = np.random.default_rng(5)
    x, fm = r.normal(size=(6, 4)), r.normal(size=(8, 9, 4))
    u, v = r.uniform(0, 8, 6), r.uniform(0, 7, 6)
    _, cache = D.refine_rows(x, u, v, fm, p)
    own = D.grid_sample(fm, np.stack([u, v], 1))
    np.testing.assert_allclose(cache["G"], own[:, None, :].repeat(2, axis=1), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_partition_and_sample_calls(seed):
    p = params(seed=seed)
    F, proj, fm = scene(seed)
    p.theta.value[...] = np.random.default_rng(seed).normal()
    out, occ, inst = D.dsfr_forward(F, proj, fm, p)
    assert inst.n_empty + inst.n_refined + inst.n_passthrough == F.features[..., 0].size
    m = occ.mask_occ.ravel()
    assert inst.n_refined == int((m & proj.in_fov).sum())
    assert inst.sample_calls == inst.n_refined * p.heads * p.points
    pt = m & ~proj.in_fov
    assert np.array_equal(out.flat()[pt], F.flat()[pt])


def test_attention_normalised():
    p = params()
    F, proj, fm = scene(0)
    x = F.flat()[:20]
    _, cache = D.refine_rows(x, np.nan_to_num(proj.u[:20]), np.nan_to_num(proj.v[:20]), fm, p)
    assert np.all(np.abs(cache["att"].sum(axis=-1) - 1) < 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_sparse_equals_dense(seed):
    p = params(seed=seed)
    F, proj, fm = scene(seed)
    p.theta.value[...] = -1.0
    out, occ, _ = D.dsfr_forward(F, proj, fm, p)
    dense = D.refine_dense(F, proj, fm, p)
    r = occ.mask_occ.ravel() & proj.in_fov
    assert r.any()
    assert np.array_equal(out.flat()[r], dense[r])


def test_extremes_routing():
    p = params()
    F, proj, fm = scene(1)
    p.theta.value[...] = 50.0  # tau ~ 1: everything empty
    _, _, inst = D.dsfr_forward(F, proj, fm, p)
    assert inst.sample_calls == 0 and inst.n_empty == proj.u.size
    p.theta.value[...] = -50.0
    p.cls_b2.value[...] = 50.0
    inside = proj.in_fov.reshape(F.dims)
    sub = FeatureVolume(F.features, F.valid)
    out, occ, inst = D.dsfr_forward(sub, proj, fm, p)
    assert occ.mask_occ.all()
    assert inst.sample_calls == inside.sum() * p.heads * p.points


def test_instrumentation_json():
    import json
    inst = D.Instrumentation(n_voxels=4, n_empty=4)
    assert json.loads(inst.to_json())["n_empty"] == 4


def test_theta_gradient_only_from_tau():
    p = params()
    F, proj, fm = scene(2)
    net = D.Dsfr(p)
    out, occ, inst, cache = net.forward(F.features, proj, fm)
    net.backward(cache, np.ones_like(out))
    assert p.theta.grad[0] == 0.0
    D.classify_backward(cache["ccache"], p, np.zeros(occ.prob.shape), dtau=1.0)
    s = sigmoid(0.0)
    assert p.theta.grad[0] == pytest.approx(0.8 * s * (1 - s))
