"""Depth-weighted ROI lifting of 2D features into the voxel grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import CameraModel, Projection, VoxelGridSpec, grid_boxes, project_grid
from .voxcore import InvalidShape, ParameterStore


@dataclass
class DepthVolume:
    """Per-pixel distribution over ``D`` depth bins centred uniformly on
    ``[d_min, d_max]``."""

    probs: np.ndarray  # (H, W, D)
    d_min: float
    d_max: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[2] < 2:
            raise InvalidShape("depth volume must be H x W x D with D >= 2")
        if not self.d_max > self.d_min:
            raise ValueError("d_max must exceed d_min")
        if not np.allclose(self.probs.sum(axis=2), 1.0, atol=1e-9, rtol=0) or (self.probs < 0).any():
            raise ValueError("per-pixel depth weights must be a distribution")

    @property
    def n_bins(self) -> int:
        return self.probs.shape[2]

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / (self.n_bins - 1)

    def centers(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.n_bins)

    @classmethod
    def from_depth_map(cls, depth, n_bins: int, d_min: float, d_max: float) -> DepthVolume:
        """Triangular kernel two bins wide around each pixel's depth.

        Depths outside the bin range (including ``inf`` for rays that hit
        nothing) are clamped to the nearest end bin.
        """
        depth = np.asarray(depth, dtype=np.float64)
        d = np.clip(np.nan_to_num(depth, nan=d_max, posinf=d_max, neginf=d_min), d_min, d_max)
        centers = np.linspace(d_min, d_max, n_bins)
        width = (d_max - d_min) / (n_bins - 1)
        w = np.maximum(0.0, 1.0 - np.abs(centers - d[..., None]) / width)
        return cls(w / w.sum(axis=-1, keepdims=True), d_min, d_max)


@dataclass
class FeatureVolume:
    features: np.ndarray  # (X, Y, Z, C)
    valid: np.ndarray  # (X, Y, Z) bool

    @property
    def dims(self):
        return self.features.shape[:3]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    def flat(self) -> np.ndarray:
        return self.features.reshape(-1, self.channels)


def _pixel_index(u, v, W, H):
    iu = np.clip(np.rint(np.nan_to_num(u)), 0, W - 1).astype(np.int64)
    iv = np.clip(np.rint(np.nan_to_num(v)), 0, H - 1).astype(np.int64)
    return iv, iu


def depth_weight(proj: Projection, dvol: DepthVolume) -> np.ndarray:
    """Linear interpolation of the nearest pixel's bin distribution at each
    point's camera depth; 0 outside ``[d_min, d_max]`` or out of view."""
    H, W, D = dvol.probs.shape
    iv, iu = _pixel_index(proj.u, proj.v, W, H)
    z = np.asarray(proj.depth, dtype=np.float64)
    inside = proj.in_fov & (z >= dvol.d_min) & (z <= dvol.d_max)
    t = np.clip((z - dvol.d_min) / dvol.bin_width, 0.0, D - 1.0)
    k = np.minimum(np.floor(t).astype(np.int64), D - 2)
    frac = t - k
    p = dvol.probs[iv, iu]
    rows = np.arange(p.shape[0])
    w = (1.0 - frac) * p[rows, k] + frac * p[rows, k + 1]
    return np.where(inside, w, 0.0)


def _roi_points(boxes):
    # 2x2 bin-centre sub-grid; point order (row, col) = (0,0), (0,1), (1,0), (1,1)
    u0, v0, u1, v1 = boxes.T
    frac = np.array([0.25, 0.75])
    pu = u0[:, None] + frac[None, :] * (u1 - u0)[:, None]
    pv = v0[:, None] + frac[None, :] * (v1 - v0)[:, None]
    n = boxes.shape[0]
    return (np.broadcast_to(pu[:, None, :], (n, 2, 2)).reshape(-1),
            np.broadcast_to(pv[:, :, None], (n, 2, 2)).reshape(-1))


def _clip_boxes(boxes, W, H):
    b = np.array(boxes, dtype=np.float64, ndmin=2, copy=True)
    ok = (b[:, 2] >= 0) & (b[:, 0] <= W - 1) & (b[:, 3] >= 0) & (b[:, 1] <= H - 1) & np.isfinite(b).all(axis=1)
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, W - 1)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, H - 1)
    b[~ok] = 0.0
    return b, ok


def roi_pool_many(f_T, boxes):
    """Average of bilinear samples on a 2x2 sub-grid inside each box.

    Returns ``(features (N, C), valid (N,))``; boxes missing the image give
    zero rows with ``valid=False``.
    """
    H, W, C = f_T.shape
    b, ok = _clip_boxes(boxes, W, H)
    pu, pv = _roi_points(b)
    samp = kernels.bilinear_sample(f_T, pu, pv).reshape(-1, 4, C)
    out = 0.25 * (((samp[:, 0] + samp[:, 1]) + samp[:, 2]) + samp[:, 3])
    out[~ok] = 0.0
    return out, ok


def roi_pool_backward(f_T, boxes, grad_out):
    H, W, C = f_T.shape
    b, ok = _clip_boxes(boxes, W, H)
    pu, pv = _roi_points(b)
    g = np.where(ok[:, None], 0.25 * np.asarray(grad_out, dtype=np.float64), 0.0)
    g4 = np.repeat(g, 4, axis=0)
    gm, _, _ = kernels.bilinear_backward(f_T, pu, pv, g4)
    return gm


def roi_pool(f_T, box):
    feats, ok = roi_pool_many(f_T, np.asarray(box, dtype=np.float64)[None, :])
    return feats[0], bool(ok[0])


@dataclass
class LiftGeometry:
    """Everything in the lift that depends only on grid, camera and depth."""

    spec: VoxelGridSpec
    proj: Projection
    boxes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, spec: VoxelGridSpec, cam: CameraModel, dvol: DepthVolume) -> LiftGeometry:
        if dvol.probs.shape[:2] != (cam.height, cam.width):
            raise InvalidShape("depth volume does not match the image size")
        proj = project_grid(spec, cam)
        boxes = grid_boxes(spec, cam)
        boxes[~proj.in_fov] = np.nan
        return cls(spec, proj, boxes, depth_weight(proj, dvol))

    @property
    def valid(self) -> np.ndarray:
        return self.proj.in_fov


class Lifter:
    def __init__(self, store: ParameterStore, channels: int):
        self.channels = channels
        self.w = store.add("lift.proj", (channels, channels), scale=1.0 / (0.02 * np.sqrt(channels)))

    def forward(self, f_T, geom: LiftGeometry):
        f_T = np.asarray(f_T, dtype=np.float64)
        if f_T.shape[2] != self.channels:
            raise InvalidShape(f"feature map has {f_T.shape[2]} channels, expected {self.channels}")
        idx = np.flatnonzero(geom.valid)
        V = geom.spec.n_voxels
        pooled, ok = roi_pool_many(f_T, geom.boxes[idx])
        proj_feats = pooled @ self.w.value
        F = np.zeros((V, self.channels))
        wts = geom.weights[idx] * ok
        F[idx] = wts[:, None] * proj_feats
        return F, dict(f_T=f_T, idx=idx, pooled=pooled, wts=wts, geom=geom)

    def backward(self, cache, dF):
        idx, wts, pooled = cache["idx"], cache["wts"], cache["pooled"]
        g = np.asarray(dF, dtype=np.float64).reshape(-1, self.channels)[idx] * wts[:, None]
        self.w.grad += pooled.T @ g
        g_pooled = g @ self.w.value.T
        return roi_pool_backward(cache["f_T"], cache["geom"].boxes[idx], g_pooled)

    def volume(self, F, geom: LiftGeometry) -> FeatureVolume:
        X, Y, Z = geom.spec.dims
        return FeatureVolume(F.reshape(X, Y, Z, self.channels), geom.valid.reshape(X, Y, Z))


def lift(f_T, spec: VoxelGridSpec, cam: CameraModel, dvol: DepthVolume, lifter: Lifter) -> FeatureVolume:
    geom = LiftGeometry.build(spec, cam, dvol)
    F, _ = lifter.forward(f_T, geom)
    return lifter.volume(F, geom)
