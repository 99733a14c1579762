import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevox.camera import (CameraModel, NoProjection, VoxelGridSpec, fov_mask, grid_boxes, project,
                              project_grid, voxel_box)

CAM = CameraModel.from_params(100, 100, 64, 32, width=128, height=64)


def test_project_examples():
    p = project([[0, 0, 5], [0, 0, -1], [1, 0, 2]], CAM)
    assert (p.u[0], p.v[0], p.depth[0], p.in_fov[0]) == (64, 32, 5, True)
    assert not p.in_fov[1]
    assert p.u[2] == 114 and p.v[2] == 32


def test_zero_depth_not_divided():
    p = project([[1.0, 1.0, 0.0]], CAM)
    assert not p.in_fov[0] and np.isnan(p.u[0])


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(np.diag([1.0, 1.0, 2.0]), np.eye(3), np.zeros(3), (4, 4))
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.diag([1.0, 1.0, 1.1]), np.zeros(3), (4, 4))
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.eye(3), np.zeros(3), (0, 4))


def test_camera_text_roundtrip(tmp_path):
    cam = CameraModel.looking_at((0.3, -2, 1.5), (0, 1, 0), 40, 41, 31.5, 15.5, 64, 32)
    cam.save(tmp_path / "cam.txt")
    back = CameraModel.load(tmp_path / "cam.txt")
    assert np.array_equal(back.K, cam.K) and np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)
    assert back.image_size == (64, 32)
    assert "r22=" in cam.to_text()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.integers(0, 1000))
def test_focal_scaling(s, seed):
    r = np.random.default_rng(seed)
    P = r.uniform(-1, 1, size=(20, 3)) + [0, 0, 3]
    a = project(P, CAM)
    cam2 = CameraModel.from_params(100 * s, 100 * s, 64, 32, width=128, height=64)
    b = project(P, cam2)
    np.testing.assert_allclose(b.u - 64, s * (a.u - 64), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(b.v - 32, s * (a.v - 32), rtol=1e-12, atol=1e-9)


def test_grid_behind_camera_all_false():
    spec = VoxelGridSpec((4, 4, 2), (-1, -1, -5), 0.2)
    assert not fov_mask(spec, CAM).any()


def test_project_is_pure():
    spec = VoxelGridSpec((3, 3, 2), (-0.3, -0.3, 2), 0.2)
    a, b = project_grid(spec, CAM), project_grid(spec, CAM)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.in_fov, b.in_fov)


def test_voxel_centers_half_offset():
    spec = VoxelGridSpec((2, 1, 1), (1.0, 2.0, 3.0), 0.5)
    np.testing.assert_array_equal(spec.centers(), [[1.25, 2.25, 3.25], [1.75, 2.25, 3.25]])


def test_box_on_axis_two_pixels():
    # centre at depth 10
    spec = VoxelGridSpec((1, 1, 1), (-0.1, -0.1, 9.9), 0.2)
    u0, v0, u1, v1 = voxel_box(spec, (0, 0, 0), CAM)
    # the near face at depth 9.9 bounds the box
    w = 100 * 0.2 / 9.9
    assert u1 - u0 == pytest.approx(w, rel=1e-12)
    assert 0.5 * (u0 + u1) == pytest.approx(64) and 0.5 * (v0 + v1) == pytest.approx(32)
    assert w == pytest.approx(2.0, rel=0.02)


def test_box_clipped_at_edge():
    spec = VoxelGridSpec((1, 1, 1), (-3.3, -0.1, 4.9), 0.2)  # straddles u = 0
    u0, v0, u1, v1 = voxel_box(spec, (0, 0, 0), CAM)
    assert u0 == 0.0 and u1 > 0


def test_box_thin_expanded_and_errors():
    spec = VoxelGridSpec((1, 1, 1), (-0.001, -0.001, 50), 0.002)
    u0, v0, u1, v1 = voxel_box(spec, (0, 0, 0), CAM)
    assert u1 - u0 == pytest.approx(1.0) and v1 - v0 == pytest.approx(1.0)
    with pytest.raises(NoProjection):
        voxel_box(VoxelGridSpec((1, 1, 1), (0, 0, -3), 0.2), (0, 0, 0), CAM)
    with pytest.raises(IndexError):
        voxel_box(spec, (1, 0, 0), CAM)


@pytest.mark.parametrize("seed", range(5))
def test_box_contains_interior_projections(seed):
    r = np.random.default_rng(seed)
    cam = CameraModel.looking_at(r.uniform(-1, 1, 3) + [0, -4, 2], (0, 0, 0), 60, 60, 31.5, 15.5, 64, 32)
    spec = VoxelGridSpec((4, 4, 2), (-0.4, -0.4, 0), 0.2)
    idx = tuple(int(r.integers(0, d)) for d in spec.dims)
    u0, v0, u1, v1 = voxel_box(spec, idx, cam)
    lo = np.asarray(spec.origin) + np.asarray(idx) * spec.voxel_size
    pts = lo + r.random((1000, 3)) * spec.voxel_size
    p = project(pts, cam)
    pu = np.clip(p.u, 0, cam.width - 1)
    pv = np.clip(p.v, 0, cam.height - 1)
    assert np.all((pu >= u0 - 1e-9) & (pu <= u1 + 1e-9) & (pv >= v0 - 1e-9) & (pv <= v1 + 1e-9))


def test_grid_boxes_matches_voxel_box():
    cam = CameraModel.looking_at((0.2, -3, 1.5), (0, 0, 0), 40, 40, 31.5, 15.5, 64, 32)
    spec = VoxelGridSpec((4, 3, 2), (-0.4, -0.3, 0), 0.2)
    boxes = grid_boxes(spec, cam)
    for n, idx in enumerate(np.ndindex(*spec.dims)):
        np.testing.assert_allclose(boxes[n], voxel_box(spec, idx, cam), atol=1e-12)
