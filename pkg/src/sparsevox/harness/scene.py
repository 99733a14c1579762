"""Synthetic street-like scenes: a ground strip plus foreground boxes, seen by
one pinhole camera, with ray-cast depth and template image features."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import kernels
from ..camera import CameraModel, VoxelGridSpec, project_grid
from ..lift3d import DepthVolume
from ..voxcore import DEFAULT_CLASSES, ClassTable, LabelGrid, RngStream, load_array, save_array
from .config import RunConfig

_BG = ("road", "sidewalk", "terrain", "building", "vegetation", "pole", "parking", "fence")
_FG = ("car", "truck", "person", "bicycle", "motorcycle", "rider", "bus", "trailer")


def class_table_for(n_classes: int) -> ClassTable:
    if n_classes == len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES
    n_fg = (n_classes - 1) // 2
    n_bg = n_classes - 1 - n_fg
    bg = [_BG[i] if i < len(_BG) else f"background{i}" for i in range(n_bg)]
    fg = [_FG[i] if i < len(_FG) else f"object{i}" for i in range(n_fg)]
    return ClassTable(("empty", *bg, *fg), (False,) * (1 + n_bg) + (True,) * n_fg)


def scene_geometry(cfg: RunConfig):
    """Grid spec and camera shared by every scene of a config."""
    X, Y, Z = cfg.dims
    s = cfg.voxel_size
    spec = VoxelGridSpec(cfg.dims, (-0.5 * X * s, 0.0, 0.0), s)
    W, H = cfg.image_width, cfg.image_height
    eye = (0.0, -0.3 * Y * s, Z * s + 0.5 * Y * s)
    target = (0.0, 0.5 * Y * s, 0.0)
    f = 0.5 * W
    cam = CameraModel.looking_at(eye, target, f, f, (W - 1) / 2, (H - 1) / 2, W, H)
    return spec, cam


def depth_range(spec: VoxelGridSpec, cam: CameraModel):
    proj = project_grid(spec, cam)
    d = proj.depth[proj.in_fov]
    if d.size == 0:
        return 0.1, 0.1 + spec.voxel_size
    return max(1e-3, float(d.min()) - spec.voxel_size), float(d.max()) + spec.voxel_size


@dataclass
class SyntheticScene:
    labels: LabelGrid
    depth: np.ndarray  # (H, W) camera depth of the first surface, inf where no hit
    camera: CameraModel
    features: np.ndarray  # (H, W, C)
    spec: VoxelGridSpec
    front_class: np.ndarray  # (H, W) class of the first voxel hit, 0 on a miss

    @property
    def occupancy_fraction(self) -> float:
        return float(self.labels.occupancy().mean())

    def depth_volume(self, n_bins: int) -> DepthVolume:
        d_min, d_max = depth_range(self.spec, self.camera)
        return DepthVolume.from_depth_map(self.depth, n_bins, d_min, d_max)

    # -------------------------------------------------------------- io

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_array(out / "labels.vxg", self.labels.labels.astype(np.float64))
        save_array(out / "depth.vxg", self.depth)
        save_array(out / "features.vxg", self.features)
        save_array(out / "front_class.vxg", self.front_class.astype(np.float64))
        self.camera.save(out / "camera.txt")
        X, Y, Z = self.spec.dims
        ox, oy, oz = self.spec.origin
        tab = self.labels.class_table
        (out / "grid.txt").write_text(
            f"dims={X}x{Y}x{Z}\norigin={ox!r},{oy!r},{oz!r}\nvoxel_size={self.spec.voxel_size!r}\n"
            f"classes={','.join(tab.names)}\nforeground={','.join(str(int(b)) for b in tab.foreground)}\n")

    @classmethod
    def load(cls, path) -> SyntheticScene:
        path = Path(path)
        kv = dict(line.split("=", 1) for line in (path / "grid.txt").read_text().splitlines() if "=" in line)
        spec = VoxelGridSpec(tuple(int(x) for x in kv["dims"].split("x")),
                             tuple(float(x) for x in kv["origin"].split(",")), float(kv["voxel_size"]))
        table = ClassTable(tuple(kv["classes"].split(",")), tuple(x == "1" for x in kv["foreground"].split(",")))
        labels = LabelGrid(load_array(path / "labels.vxg").astype(np.int64), table)
        return cls(labels, load_array(path / "depth.vxg"), CameraModel.load(path / "camera.txt"),
                   load_array(path / "features.vxg"), spec,
                   load_array(path / "front_class.vxg").astype(np.int64))


def _place_boxes(lab, budget, fg, rng, max_tries=1000):
    X, Y, Z = lab.shape
    placed = 0
    for _ in range(max_tries):
        if placed >= budget:
            break
        sx, sy = rng.integers(1, 4, size=2)
        sz = int(rng.integers(1, min(3, Z) + 1))
        x0 = int(rng.integers(0, X - sx + 1))
        y0 = int(rng.integers(0, Y - sy + 1))
        k = int(fg[rng.integers(0, len(fg))])
        box = np.zeros_like(lab, dtype=bool)
        box[x0:x0 + sx, y0:y0 + sy, 0:sz] = True
        new = np.flatnonzero((box & (lab == 0)).ravel())
        new = new[:budget - placed]  # the last box is trimmed to hit the budget
        lab.flat[new] = k
        placed += new.size
    return placed


def _ground(lab, budget, table: ClassTable):
    """Fill the z=0 layer row by row away from the camera."""
    X, Y, _ = lab.shape
    bg = [k for k in range(1, len(table)) if table.is_background(k)]
    if not bg or budget <= 0:
        return 0
    xc = np.abs(np.arange(X) - (X - 1) / 2) / max(X / 2, 1)
    placed = 0
    for y in range(Y):
        for x in range(X):
            if placed >= budget:
                return placed
            if lab[x, y, 0] != 0:
                continue
            if y >= 0.75 * Y and len(bg) > 2:
                k = bg[2]
            elif xc[x] > 0.6 and len(bg) > 1:
                k = bg[1]
            else:
                k = bg[0]
            lab[x, y, 0] = k
            placed += 1
    return placed


def render_depth(labels: np.ndarray, spec: VoxelGridSpec, cam: CameraModel):
    """Ray-cast each pixel centre; returns ``(depth, hit flat index)``."""
    W, H = cam.width, cam.height
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    pix = np.stack([uu.ravel(), vv.ravel(), np.ones(W * H)], axis=1)
    d_cam = pix @ np.linalg.inv(cam.K).T  # camera-frame z is 1, so t is depth
    d_world = d_cam @ cam.R
    occ = np.ascontiguousarray(labels != 0)
    hit, t = kernels.raycast(occ, np.asarray(spec.origin), spec.voxel_size, cam.center(), np.ascontiguousarray(d_world))
    return t.reshape(H, W), hit.reshape(H, W)


def gen_scene(cfg: RunConfig, rng: RngStream | None = None) -> SyntheticScene:
    rng = rng if rng is not None else RngStream(cfg.seed)
    table = class_table_for(cfg.n_classes)
    spec, cam = scene_geometry(cfg)
    lab = np.zeros(cfg.dims, dtype=np.int64)
    target = int(round(cfg.occupancy * spec.n_voxels))
    fg = [k for k in range(len(table)) if table.is_foreground(k)]
    geo = rng.child(0)
    n_box = _place_boxes(lab, int(round(cfg.box_density * target)), fg, geo) if fg else 0
    _ground(lab, target - n_box, table)

    depth, hit = render_depth(lab, spec, cam)
    front = np.where(hit >= 0, lab.ravel()[np.maximum(hit, 0)], 0)
    templates = rng.child(1).normal(size=(len(table), cfg.channels))
    noise = rng.child(2).normal(size=(cam.height, cam.width, cfg.channels))
    features = templates[front] + cfg.noise * noise
    return SyntheticScene(LabelGrid(lab, table), depth, cam, features, spec, front)


def scene_summary(scene: SyntheticScene) -> str:
    tab = scene.labels.class_table
    counts = {tab.names[k]: int((scene.labels.labels == k).sum()) for k in scene.labels.present()}
    return json.dumps({"dims": list(scene.spec.dims), "occupancy": scene.occupancy_fraction, "counts": counts})
