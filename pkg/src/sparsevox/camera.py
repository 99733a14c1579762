"""Pinhole projection of voxel grids onto the image plane."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .voxcore import InvalidShape, VoxError

_EPS_DEPTH = 1e-9


class NoProjection(VoxError):
    pass


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise InvalidShape("K and R must be 3x3")
        if K[2, 2] != 1.0:
            raise ValueError("K[2][2] must be 1")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("R is not orthonormal")
        W, H = (int(s) for s in self.image_size)
        if W <= 0 or H <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "image_size", (W, H))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @classmethod
    def from_params(cls, fx, fy, cx, cy, R=None, t=None, width=64, height=32) -> CameraModel:
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, (width, height))

    @classmethod
    def looking_at(cls, eye, target, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0)) -> CameraModel:
        """Camera at ``eye`` with optical axis toward ``target`` (x right, y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls.from_params(fx, fy, cx, cy, R, -R @ eye, width, height)

    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_text(self) -> str:
        vals = {
            "fx": self.K[0, 0], "fy": self.K[1, 1], "cx": self.K[0, 2], "cy": self.K[1, 2],
        }
        for i in range(3):
            for j in range(3):
                vals[f"r{i}{j}"] = self.R[i, j]
        for i in range(3):
            vals[f"t{i}"] = self.t[i]
        lines = [f"{k}={float(v)!r}" for k, v in vals.items()]
        lines += [f"width={self.width}", f"height={self.height}"]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> CameraModel:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        R = np.array([[float(kv[f"r{i}{j}"]) for j in range(3)] for i in range(3)])
        t = np.array([float(kv[f"t{i}"]) for i in range(3)])
        return cls.from_params(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                               R, t, int(kv["width"]), int(kv["height"]))

    @classmethod
    def load(cls, path) -> CameraModel:
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple[int, int, int]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    def centers(self) -> np.ndarray:
        """(X*Y*Z, 3) voxel centers in row-major (x, y, z) order."""
        idx = np.indices(self.dims).reshape(3, -1).T
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def corners(self, index) -> np.ndarray:
        lo = np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * self.voxel_size
        offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
        return lo + offs * self.voxel_size


@dataclass
class Projection:
    """Per-point pixel coordinates, camera depth and field-of-view flag."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_fov: np.ndarray

    def __len__(self):
        return self.u.shape[0]

    def subset(self, index) -> Projection:
        return Projection(self.u[index], self.v[index], self.depth[index], self.in_fov[index])


def project(centers, cam: CameraModel) -> Projection:
    P = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if P.shape[-1] != 3:
        raise InvalidShape(f"points must have 3 coordinates, got shape {P.shape}")
    hom = (P @ cam.R.T + cam.t) @ cam.K.T
    depth = hom[:, 2].copy()
    safe = np.abs(depth) >= _EPS_DEPTH
    denom = np.where(safe, depth, 1.0)
    u = np.where(safe, hom[:, 0] / denom, np.nan)
    v = np.where(safe, hom[:, 1] / denom, np.nan)
    with np.errstate(invalid="ignore"):
        in_fov = safe & (depth > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return Projection(u, v, depth, in_fov)


def project_grid(spec: VoxelGridSpec, cam: CameraModel) -> Projection:
    return project(spec.centers(), cam)


def fov_mask(spec: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    return project_grid(spec, cam).in_fov.reshape(spec.dims)


def voxel_box(spec: VoxelGridSpec, index, cam: CameraModel) -> tuple[float, float, float, float]:
    """Pixel bounding box ``(u_min, v_min, u_max, v_max)`` of a voxel's corners.

    Only corners in front of the camera contribute. The box is clipped to the
    pixel-center extent ``[0, W-1] x [0, H-1]``; a side thinner than one pixel
    is widened to one pixel around its midpoint.
    """
    if any(not 0 <= int(i) < d for i, d in zip(index, spec.dims)):
        raise IndexError(f"voxel {tuple(index)} outside grid {spec.dims}")
    pr = project(spec.corners(index), cam)
    front = pr.depth > _EPS_DEPTH
    if not front.any():
        raise NoProjection(f"voxel {tuple(index)} lies behind the camera")
    u, v = pr.u[front], pr.v[front]
    W, H = cam.width, cam.height
    box = [u.min(), v.min(), u.max(), v.max()]
    for lo, hi, size in ((0, 2, W), (1, 3, H)):
        a = min(max(box[lo], 0.0), size - 1.0)
        b = min(max(box[hi], 0.0), size - 1.0)
        if b - a < 1.0:
            mid = 0.5 * (a + b)
            a, b = mid - 0.5, mid + 0.5
            if a < 0:
                a, b = 0.0, min(1.0, size - 1.0)
            elif b > size - 1.0:
                a, b = max(size - 2.0, 0.0), size - 1.0
        box[lo], box[hi] = a, b
    return tuple(float(x) for x in box)


def _clip_axis(a, b, size):
    a = np.clip(a, 0.0, size - 1.0)
    b = np.clip(b, 0.0, size - 1.0)
    thin = b - a < 1.0
    mid = 0.5 * (a + b)
    na, nb = mid - 0.5, mid + 0.5
    low = na < 0
    high = nb > size - 1.0
    na = np.where(low, 0.0, np.where(high, max(size - 2.0, 0.0), na))
    nb = np.where(low, min(1.0, size - 1.0), np.where(high, size - 1.0, nb))
    return np.where(thin, na, a), np.where(thin, nb, b)


def grid_boxes(spec: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    """(V, 4) boxes for every voxel, vectorised ``voxel_box``; NaN rows where
    no corner is in front of the camera."""
    idx = np.indices(spec.dims).reshape(3, -1).T
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    corners = np.asarray(spec.origin) + (idx[:, None, :] + offs[None]) * spec.voxel_size
    pr = project(corners.reshape(-1, 3), cam)
    front = (pr.depth > _EPS_DEPTH).reshape(-1, 8)
    u = np.where(front, pr.u.reshape(-1, 8), np.nan)
    v = np.where(front, pr.v.reshape(-1, 8), np.nan)
    out = np.full((spec.n_voxels, 4), np.nan)
    ok = front.any(axis=1)
    with np.errstate(invalid="ignore"):
        u0, u1 = _clip_axis(np.nanmin(u[ok], axis=1), np.nanmax(u[ok], axis=1), cam.width)
        v0, v1 = _clip_axis(np.nanmin(v[ok], axis=1), np.nanmax(v[ok], axis=1), cam.height)
    out[ok] = np.stack([u0, v0, u1, v1], axis=1)
    return out
