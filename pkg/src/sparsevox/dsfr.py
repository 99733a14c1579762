"""Occupancy-routed voxel refinement.

Voxels whose predicted occupancy falls below a learned threshold take a cheap
shortcut (a blend toward one shared dummy feature); occupied voxels inside
the camera frustum are refined by multi-head deformable attention over the
filtered image features. Every voxel goes through exactly one branch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .camera import Projection
from .lift3d import FeatureVolume
from .voxcore import InvalidShape, ParameterStore, sigmoid, softmax, softmax_backward

TAU_MIN = 0.2
TAU_SPAN = 0.8


def threshold(theta) -> float:
    return TAU_MIN + TAU_SPAN * sigmoid(theta)


@dataclass
class OccupancyField:
    prob: np.ndarray  # (X, Y, Z)
    tau: float
    mask_occ: np.ndarray
    mask_empty: np.ndarray

    @classmethod
    def from_prob(cls, prob, tau) -> OccupancyField:
        occ = prob >= tau
        return cls(prob, float(tau), occ, ~occ)

    @property
    def p_empty(self) -> np.ndarray:
        return 1.0 - self.prob


@dataclass
class Instrumentation:
    n_voxels: int = 0
    n_empty: int = 0
    n_refined: int = 0
    n_passthrough: int = 0
    sample_calls: int = 0
    heads: int = 0
    points: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def normalize_points(u, v, W, H):
    return 2.0 * np.asarray(u) / (W - 1) - 1.0, 2.0 * np.asarray(v) / (H - 1) - 1.0


def denormalize_points(gx, gy, W, H):
    return (np.asarray(gx) + 1.0) * 0.5 * (W - 1), (np.asarray(gy) + 1.0) * 0.5 * (H - 1)


def grid_sample(f_T, points) -> np.ndarray:
    """Bilinear samples of ``f_T`` (H, W, C) at pixel points (N, 2) = (u, v).

    Zero padding outside the image. Pixel centres sit at integer coordinates,
    i.e. the ``[-1, 1]`` normalisation ``2u/(W-1) - 1`` with aligned corners;
    sampling is done directly in pixel units.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return kernels.bilinear_sample(np.asarray(f_T, dtype=np.float64), pts[:, 0], pts[:, 1])


def grid_sample_backward(f_T, points, grad_out):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    gm, gu, gv = kernels.bilinear_backward(np.asarray(f_T, dtype=np.float64), pts[:, 0], pts[:, 1], grad_out)
    return gm, np.stack([gu, gv], axis=1)


def conv3d(F, w, b):
    """3x3x3 zero-padded stride-1 convolution of an (X, Y, Z, Cin) grid."""
    X, Y, Z, _ = F.shape
    Fp = np.pad(F, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (X, Y, Z, w.shape[-1])).copy()
    for i in range(3):
        for j in range(3):
            for k in range(3):
                out += Fp[i:i + X, j:j + Y, k:k + Z] @ w[i, j, k]
    return out


def conv3d_backward(F, w, dout):
    X, Y, Z, _ = F.shape
    Fp = np.pad(F, ((1, 1), (1, 1), (1, 1), (0, 0)))
    dFp = np.zeros_like(Fp)
    dw = np.zeros_like(w)
    g = dout.reshape(-1, dout.shape[-1])
    for i in range(3):
        for j in range(3):
            for k in range(3):
                sl = Fp[i:i + X, j:j + Y, k:k + Z]
                dw[i, j, k] = sl.reshape(-1, sl.shape[-1]).T @ g
                dFp[i:i + X, j:j + Y, k:k + Z] += dout @ w[i, j, k].T
    return dFp[1:-1, 1:-1, 1:-1], dw, g.sum(axis=0)


class DsfrParams:
    """Learnable state of the refinement stage (``dsfr.`` prefix in ``store``)."""

    def __init__(self, store: ParameterStore, channels: int, heads: int = 4, points: int = 4,
                 classifier_width: int | None = None):
        if heads < 1 or points < 1:
            raise ValueError("heads and points must be >= 1")
        C = channels
        Ch = classifier_width or channels
        HS = heads * points
        self.channels, self.heads, self.points, self.classifier_width = C, heads, points, Ch

        def fan(n):
            return 1.0 / (0.02 * np.sqrt(n))

        self.cls_w1 = store.add("dsfr.cls.w1", (3, 3, 3, C, Ch), scale=fan(27 * C))
        self.cls_b1 = store.add("dsfr.cls.b1", (Ch,), kind="bias")
        self.cls_w2 = store.add("dsfr.cls.w2", (Ch,), scale=fan(Ch))
        self.cls_b2 = store.add("dsfr.cls.b2", (1,), kind="bias")
        self.theta = store.add("dsfr.theta", (1,), kind="zeros")
        self.em = store.add("dsfr.em", (C,), kind="zeros")
        self.off_w = store.add("dsfr.offset.w", (C, HS * 2), scale=fan(C))
        self.off_b = store.add("dsfr.offset.b", (HS * 2,), kind="bias")
        self.att_w = store.add("dsfr.weight.w", (C, HS), scale=fan(C))
        self.att_b = store.add("dsfr.weight.b", (HS,), kind="bias")
        self.red_w = store.add("dsfr.reduce.w", (heads * C, C), scale=fan(heads * C))
        self.red_b = store.add("dsfr.reduce.b", (C,), kind="bias")
        self.fuse_w = store.add("dsfr.fuse.w", (2 * C, C), scale=fan(2 * C))
        self.fuse_b = store.add("dsfr.fuse.b", (C,), kind="bias")

    @property
    def tau(self) -> float:
        return float(threshold(self.theta.value[0]))


# ------------------------------------------------------------------ classifier


def classify_forward(F, params: DsfrParams):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4 or F.shape[3] != params.channels:
        raise InvalidShape(f"feature volume must be XxYxZx{params.channels}, got {F.shape}")
    h = conv3d(F, params.cls_w1.value, params.cls_b1.value)
    a = np.maximum(h, 0.0)
    logit = a @ params.cls_w2.value + params.cls_b2.value[0]
    prob = sigmoid(logit)
    theta = params.theta.value[0]
    tau = float(threshold(theta))
    return OccupancyField.from_prob(prob, tau), dict(F=F, h=h, a=a, prob=prob, theta=theta)


def classify_backward(cache, params: DsfrParams, dprob, dtau=0.0):
    prob, a, h = cache["prob"], cache["a"], cache["h"]
    dlogit = np.asarray(dprob, dtype=np.float64) * prob * (1.0 - prob)
    params.cls_w2.grad += np.tensordot(a, dlogit, axes=([0, 1, 2], [0, 1, 2]))
    params.cls_b2.grad += dlogit.sum()
    dh = dlogit[..., None] * params.cls_w2.value * (h > 0)
    dF, dw1, db1 = conv3d_backward(cache["F"], params.cls_w1.value, dh)
    params.cls_w1.grad += dw1
    params.cls_b1.grad += db1
    s = sigmoid(cache["theta"])
    params.theta.grad += dtau * TAU_SPAN * s * (1.0 - s)
    return dF


def classify_occupancy(F: FeatureVolume | np.ndarray, params: DsfrParams) -> OccupancyField:
    arr = F.features if isinstance(F, FeatureVolume) else F
    return classify_forward(arr, params)[0]


# ------------------------------------------------------------------ empty branch


def blend(F_rows, p_rows, em):
    return F_rows * p_rows[:, None] + em * (1.0 - p_rows)[:, None]


def blend_backward(F_rows, p_rows, em, dout):
    dF = dout * p_rows[:, None]
    dp = (dout * (F_rows - em)).sum(axis=1)
    dem = (dout * (1.0 - p_rows)[:, None]).sum(axis=0)
    return dF, dp, dem


def refine_empty(F: FeatureVolume, occ: OccupancyField, em) -> FeatureVolume:
    em = em.value if hasattr(em, "value") else np.asarray(em, dtype=np.float64)
    flat = F.flat().copy()
    e = np.flatnonzero(occ.mask_empty.ravel())
    flat[e] = blend(flat[e], occ.prob.ravel()[e], em)
    return FeatureVolume(flat.reshape(F.features.shape), F.valid)


# ------------------------------------------------------------------ occupied branch


def refine_rows(x, u, v, f_T, params: DsfrParams, counter: Instrumentation | None = None):
    """Deformable-attention refinement of feature rows ``x`` (N, C) whose
    voxel centres project to pixels ``(u, v)``. Row results do not depend on
    which other rows are in the batch."""
    N, C = x.shape
    Hh, S = params.heads, params.points
    off = kernels.linear_rows(x, params.off_w.value, params.off_b.value).reshape(N, Hh, S, 2)
    logits = kernels.linear_rows(x, params.att_w.value, params.att_b.value).reshape(N, Hh, S)
    att = softmax(logits, axis=-1)
    G = kernels.deform_aggregate(f_T, u, v, off, att)
    if counter is not None:
        counter.sample_calls += N * Hh * S
    g = kernels.linear_rows(G.reshape(N, Hh * C), params.red_w.value, params.red_b.value)
    cat = np.concatenate([x, g], axis=1)
    out = kernels.linear_rows(cat, params.fuse_w.value, params.fuse_b.value)
    return out, dict(x=x, u=u, v=v, f_T=f_T, off=off, att=att, G=G, cat=cat)


def refine_rows_backward(cache, params: DsfrParams, dout):
    x, off, att, G, cat = (cache[k] for k in ("x", "off", "att", "G", "cat"))
    N, C = x.shape
    Hh, S = params.heads, params.points
    params.fuse_w.grad += cat.T @ dout
    params.fuse_b.grad += dout.sum(axis=0)
    dcat = dout @ params.fuse_w.value.T
    dx = dcat[:, :C].copy()
    dg = dcat[:, C:]
    params.red_w.grad += G.reshape(N, Hh * C).T @ dg
    params.red_b.grad += dg.sum(axis=0)
    dG = (dg @ params.red_w.value.T).reshape(N, Hh, C)
    dmap, doff, datt = kernels.deform_aggregate_backward(cache["f_T"], cache["u"], cache["v"], off, att, dG)
    dlog = softmax_backward(att, datt, axis=-1).reshape(N, Hh * S)
    params.att_w.grad += x.T @ dlog
    params.att_b.grad += dlog.sum(axis=0)
    dx += dlog @ params.att_w.value.T
    doff = doff.reshape(N, Hh * S * 2)
    params.off_w.grad += x.T @ doff
    params.off_b.grad += doff.sum(axis=0)
    dx += doff @ params.off_w.value.T
    return dx, dmap


def refine_occupied(F: FeatureVolume, occ: OccupancyField, proj: Projection, f_T, params: DsfrParams,
                    counter: Instrumentation | None = None) -> FeatureVolume:
    flat = F.flat().copy()
    r = np.flatnonzero(occ.mask_occ.ravel() & proj.in_fov)
    if r.size:
        flat[r] = refine_rows(flat[r], proj.u[r], proj.v[r], f_T, params, counter)[0]
    return FeatureVolume(flat.reshape(F.features.shape), F.valid)


def refine_dense(F: FeatureVolume, proj: Projection, f_T, params: DsfrParams) -> np.ndarray:
    """Oracle: refine every voxel, ignoring occupancy and field of view."""
    flat = F.flat()
    u = np.nan_to_num(proj.u)
    v = np.nan_to_num(proj.v)
    return refine_rows(flat, u, v, f_T, params)[0]


# ------------------------------------------------------------------ composition


class Dsfr:
    def __init__(self, params: DsfrParams):
        self.params = params

    def forward(self, F, proj: Projection, f_T):
        """``F`` is (X, Y, Z, C). Returns ``(refined (V, C), occupancy, cache)``."""
        p = self.params
        F = np.asarray(F, dtype=np.float64)
        if f_T.shape[2] != p.channels:
            raise InvalidShape(f"image features have {f_T.shape[2]} channels, expected {p.channels}")
        V = F.shape[0] * F.shape[1] * F.shape[2]
        if len(proj) != V:
            raise InvalidShape(f"{len(proj)} projections for {V} voxels")
        occ, ccache = classify_forward(F, p)
        flat = F.reshape(V, p.channels)
        prob = occ.prob.ravel()
        m_occ = occ.mask_occ.ravel()
        e = np.flatnonzero(~m_occ)
        r = np.flatnonzero(m_occ & proj.in_fov)
        inst = Instrumentation(n_voxels=V, n_empty=e.size, n_refined=r.size,
                               n_passthrough=int(m_occ.sum()) - r.size, heads=p.heads, points=p.points)
        out = flat.copy()
        out[e] = blend(flat[e], prob[e], p.em.value)
        rcache = None
        if r.size:
            out[r], rcache = refine_rows(flat[r], proj.u[r], proj.v[r], f_T, p, inst)
        cache = dict(ccache=ccache, flat=flat, prob=prob, e=e, r=r, rcache=rcache, f_shape=f_T.shape)
        return out, occ, inst, cache

    def backward(self, cache, dout, dprob=None):
        """Returns ``(dF (X, Y, Z, C), df_T)``; ``dprob`` is any extra gradient
        on the occupancy probabilities (e.g. from the occupancy loss)."""
        p = self.params
        flat, prob, e, r = cache["flat"], cache["prob"], cache["e"], cache["r"]
        dout = np.asarray(dout, dtype=np.float64).reshape(flat.shape)
        dflat = dout.copy()  # identity on pass-through voxels
        dp = np.zeros_like(prob) if dprob is None else np.asarray(dprob, dtype=np.float64).ravel().copy()
        dF_e, dp_e, dem = blend_backward(flat[e], prob[e], p.em.value, dout[e])
        dflat[e] = dF_e
        dp[e] += dp_e
        p.em.grad += dem
        df_T = np.zeros(cache["f_shape"])
        if r.size:
            dx, dmap = refine_rows_backward(cache["rcache"], p, dout[r])
            dflat[r] = dx
            df_T += dmap
        ccache = cache["ccache"]
        dF = dflat.reshape(ccache["F"].shape)
        dF = dF + classify_backward(ccache, p, dp.reshape(ccache["prob"].shape))
        return dF, df_T


def dsfr_forward(F: FeatureVolume, proj: Projection, f_T, params: DsfrParams):
    """Returns ``(refined FeatureVolume, OccupancyField, Instrumentation)``."""
    out, occ, inst, _ = Dsfr(params).forward(F.features, proj, f_T)
    return FeatureVolume(out.reshape(F.features.shape), F.valid), occ, inst
