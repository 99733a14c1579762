"""Registry of differentiable ops for ``vjp_check``.

Each sampler draws a small random instance and re-draws it when the instance
sits close to a non-differentiable point (a bilinear grid line, a ReLU hinge,
a routing threshold, a clipped ratio), so central differences stay valid.
"""
from __future__ import annotations

import numpy as np

from . import dsfr as D
from . import losses as L
from .camera import CameraModel, VoxelGridSpec, project_grid
from .lift3d import DepthVolume, LiftGeometry, Lifter, roi_pool_backward, roi_pool_many
from .tgif import PromptSet, TextGuidedFilter
from .voxcore import DiffOp, ParameterStore, RngStream, register_op, sigmoid, softmax, softmax_backward

KINK = 1e-3
RETRIES = 64


def _params(store: ParameterStore, prefix: str = "") -> dict:
    return {p.name: p for p in store if p.name.startswith(prefix)}


def _far_from_grid(*coords, margin=KINK) -> bool:
    for c in coords:
        c = np.asarray(c, dtype=np.float64)
        if np.any(np.abs(c - np.rint(c)) < margin):
            return False
    return True


def _retry(build, rng: RngStream):
    """Call ``build(rng_k)`` for k = 0, 1, ... until it returns a sample."""
    for k in range(RETRIES):
        got = build(rng.child(k))
        if got is not None:
            return got
    raise RuntimeError("could not draw a kink-free sample")


def _toy_camera(spec: VoxelGridSpec, width=12, height=8) -> CameraModel:
    X, Y, Z = spec.dims
    s = spec.voxel_size
    centre = np.asarray(spec.origin) + 0.5 * s * np.array([X, Y, Z])
    eye = centre + np.array([0.0, -3.0 * s * max(X, Y), 2.0 * s * Z])
    f = 1.2 * width
    return CameraModel.looking_at(eye, centre, f, f, (width - 1) / 2, (height - 1) / 2, width, height)


# ------------------------------------------------------------------ elementary


def _lin_fwd(inp, par):
    return 3.0 * inp["x"], None


register_op(DiffOp(
    "linear3x", _lin_fwd, lambda c, g: {"x": 3.0 * g},
    lambda rng: ({"x": rng.normal(size=5)}, {}), ("x",)))


def _sig_fwd(inp, par):
    y = sigmoid(inp["x"])
    return y, y


register_op(DiffOp(
    "sigmoid", _sig_fwd, lambda y, g: {"x": g * y * (1 - y)},
    lambda rng: ({"x": rng.normal(size=6)}, {}), ("x",)))


def _softmax_fwd(inp, par):
    y = softmax(inp["logits"], axis=-1)
    return y, y


register_op(DiffOp(
    "softmax", _softmax_fwd, lambda y, g: {"logits": softmax_backward(y, g, axis=-1)},
    lambda rng: ({"logits": rng.normal(scale=2.0, size=(3, 5))}, {}), ("logits",)))


# ------------------------------------------------------------------ sampling


def _gs_fwd(inp, par):
    return D.grid_sample(inp["f_T"], inp["points"]), inp


def _gs_bwd(inp, g):
    gm, gp = D.grid_sample_backward(inp["f_T"], inp["points"], g)
    return {"f_T": gm, "points": gp}


def _gs_sample(rng):
    def build(r):
        H, W, C = 5, 7, 3
        pts = np.stack([r.uniform(-1.5, W + 0.5, 12), r.uniform(-1.5, H + 0.5, 12)], axis=1)
        if not _far_from_grid(pts):
            return None
        return {"f_T": r.normal(size=(H, W, C)), "points": pts}, {}
    return _retry(build, rng)


register_op(DiffOp("grid_sample", _gs_fwd, _gs_bwd, _gs_sample, ("f_T", "points")))


def _roi_fwd(inp, par):
    out, _ = roi_pool_many(inp["f_T"], inp["boxes"])
    return out, inp


def _roi_sample(rng):
    H, W, C = 6, 9, 4
    u0 = rng.uniform(0, W - 2, 5)
    v0 = rng.uniform(0, H - 2, 5)
    boxes = np.stack([u0, v0, u0 + rng.uniform(0.5, 3, 5), v0 + rng.uniform(0.5, 3, 5)], axis=1)
    return {"f_T": rng.normal(size=(H, W, C)), "boxes": boxes}, {}


register_op(DiffOp(
    "roi_pool", _roi_fwd,
    lambda inp, g: {"f_T": roi_pool_backward(inp["f_T"], inp["boxes"], g)},
    _roi_sample, ("f_T",)))


def _lift_fwd(inp, par):
    F, cache = inp["lifter"].forward(inp["f_T"], inp["geom"])
    cache["lifter"] = inp["lifter"]
    return F, cache


def _lift_sample(rng):
    spec = VoxelGridSpec((4, 4, 2), (-0.4, -0.4, 0.0), 0.2)
    cam = _toy_camera(spec)
    C = 3
    depth = rng.uniform(0.5, 2.5, size=(cam.height, cam.width))
    dvol = DepthVolume.from_depth_map(depth, 8, 0.2, 3.0)
    store = ParameterStore(rng.child(1))
    lifter = Lifter(store, C)
    inp = {"f_T": rng.normal(size=(cam.height, cam.width, C)), "geom": LiftGeometry.build(spec, cam, dvol),
           "lifter": lifter}
    return inp, _params(store)


register_op(DiffOp(
    "lift", _lift_fwd, lambda c, g: {"f_T": c["lifter"].backward(c, g)}, _lift_sample, ("f_T",)))


# ------------------------------------------------------------------ text filter


def _tgif_store(rng, C=4, d=3, n_classes=6, layer_norm=True):
    store = ParameterStore(rng)
    tg = TextGuidedFilter(store, n_classes, C, token_dim=d, use_layer_norm=layer_norm)
    # the zero-initialised output projection would hide the attention path
    tg.wo.value[...] = rng.normal(scale=0.5, size=tg.wo.shape)
    return store, tg


def _tgif_fwd(inp, par):
    out, cache = inp["tgif"].apply(inp["f"], inp["tokens"])
    cache["tgif"] = inp["tgif"]
    return out, cache


def _tgif_bwd(cache, g):
    df, dt = cache["tgif"].apply_backward(cache, g)
    return {"f": df, "tokens": dt}


def _tgif_sample(rng):
    store, tg = _tgif_store(rng.child(0))
    inp = {"f": rng.normal(size=(3, 4, tg.channels)), "tokens": rng.normal(size=(3, tg.token_dim)), "tgif": tg}
    return inp, _params(store)


register_op(DiffOp("tgif_apply", _tgif_fwd, _tgif_bwd, _tgif_sample, ("f", "tokens")))


def _enc_fwd(inp, par):
    T, cache = inp["tgif"].encode_prompt(inp["prompt"])
    cache["tgif"] = inp["tgif"]
    return T, cache


def _enc_bwd(cache, g):
    cache["tgif"].encode_backward(cache, g)
    return {}


def _enc_sample(rng):
    store, tg = _tgif_store(rng.child(0))
    prompt = PromptSet((4, 1, 3), tg.token_dim)
    return {"prompt": prompt, "tgif": tg}, _params(store, "tgif.")


register_op(DiffOp("encode_prompt", _enc_fwd, _enc_bwd, _enc_sample, ()))


# ------------------------------------------------------------------ refinement


def _dsfr_store(rng, C=4, heads=2, points=2):
    store = ParameterStore(rng)
    params = D.DsfrParams(store, C, heads=heads, points=points)
    # non-zero biases and dummy so every gradient path is exercised
    for p in (params.cls_b1, params.off_b, params.att_b, params.red_b, params.fuse_b, params.em):
        p.value[...] = rng.normal(scale=0.3, size=p.shape)
    params.off_w.value *= 4.0  # offsets of a few pixels
    return store, params


def _cls_fwd(inp, par):
    occ, cache = D.classify_forward(inp["F"], inp["dsfr"])
    cache["dsfr"] = inp["dsfr"]
    return (occ.prob, np.array([occ.tau])), cache


def _cls_bwd(cache, g):
    gp, gt = g
    return {"F": D.classify_backward(cache, cache["dsfr"], gp, dtau=float(np.sum(gt)))}


def _cls_sample(rng):
    def build(r):
        store, params = _dsfr_store(r.child(0))
        F = r.normal(size=(3, 3, 2, params.channels))
        _, cache = D.classify_forward(F, params)
        if np.min(np.abs(cache["h"])) < 1e-4:
            return None
        params.theta.value[...] = r.normal()
        return {"F": F, "dsfr": params}, _params(store, "dsfr.cls") | {"dsfr.theta": params.theta}
    return _retry(build, rng)


register_op(DiffOp("classify_occupancy", _cls_fwd, _cls_bwd, _cls_sample, ("F",)))


def _empty_fwd(inp, par):
    F, prob, m = inp["F"], inp["prob"], inp["mask_empty"]
    C = F.shape[-1]
    flat = F.reshape(-1, C).copy()
    e = np.flatnonzero(m.ravel())
    p = prob.ravel()
    flat[e] = D.blend(flat[e], p[e], par["dsfr.em"].value)
    return flat.reshape(F.shape), dict(F=F, prob=prob, e=e, em=par["dsfr.em"])


def _empty_bwd(cache, g):
    F, prob, e, em = cache["F"], cache["prob"], cache["e"], cache["em"]
    C = F.shape[-1]
    g = np.asarray(g).reshape(-1, C)
    dF = g.copy()
    dprob = np.zeros(prob.size)
    dF_e, dp_e, dem = D.blend_backward(F.reshape(-1, C)[e], prob.ravel()[e], em.value, g[e])
    dF[e] = dF_e
    dprob[e] = dp_e
    em.grad += dem
    return {"F": dF.reshape(F.shape), "prob": dprob.reshape(prob.shape)}


def _empty_sample(rng):
    C = 4
    store = ParameterStore(rng.child(0))
    em = store.add("dsfr.em", (C,))
    em.value[...] = rng.normal(size=C)
    prob = rng.uniform(0.05, 0.95, size=(3, 3, 2))
    return {"F": rng.normal(size=(3, 3, 2, C)), "prob": prob, "mask_empty": prob < 0.6}, {"dsfr.em": em}


register_op(DiffOp("refine_empty", _empty_fwd, _empty_bwd, _empty_sample, ("F", "prob")))


def _scene_inputs(r, dims, C):
    spec = VoxelGridSpec(dims, (-0.1 * dims[0], -0.1 * dims[1], 0.0), 0.2)
    cam = _toy_camera(spec)
    proj = project_grid(spec, cam)
    f_T = r.normal(size=(cam.height, cam.width, C))
    F = r.normal(size=tuple(dims) + (C,))
    return proj, f_T, F


def _points_ok(cache) -> bool:
    if cache is None:
        return True
    off = cache["off"]
    return _far_from_grid(cache["u"][:, None, None] + off[..., 0], cache["v"][:, None, None] + off[..., 1])


def _occ_fwd(inp, par):
    F, proj, f_T, params = inp["F"], inp["proj"], inp["f_T"], inp["dsfr"]
    C = F.shape[-1]
    flat = F.reshape(-1, C).copy()
    r = np.flatnonzero(inp["mask_occ"].ravel() & proj.in_fov)
    out, rc = D.refine_rows(flat[r], proj.u[r], proj.v[r], f_T, params)
    flat[r] = out
    return flat.reshape(F.shape), dict(rc=rc, r=r, shape=F.shape, f_shape=f_T.shape, dsfr=params)


def _occ_bwd(cache, g):
    C = cache["shape"][-1]
    g = np.asarray(g).reshape(-1, C)
    dF = g.copy()
    r = cache["r"]
    dx, dmap = D.refine_rows_backward(cache["rc"], cache["dsfr"], g[r])
    dF[r] = dx
    return {"F": dF.reshape(cache["shape"]), "f_T": dmap}


def _occ_sample(rng):
    def build(r):
        store, params = _dsfr_store(r.child(0))
        proj, f_T, F = _scene_inputs(r, (4, 4, 2), params.channels)
        mask = r.random(F.shape[:3]) < 0.6
        inp = {"F": F, "proj": proj, "f_T": f_T, "mask_occ": mask, "dsfr": params}
        _, cache = _occ_fwd(inp, {})
        if not _points_ok(cache["rc"]):
            return None
        keys = ("dsfr.offset", "dsfr.weight", "dsfr.reduce", "dsfr.fuse")
        return inp, {k: v for k, v in _params(store).items() if k.startswith(keys)}
    return _retry(build, rng)


register_op(DiffOp("refine_occupied", _occ_fwd, _occ_bwd, _occ_sample, ("F", "f_T")))


def _dsfr_fwd(inp, par):
    model = D.Dsfr(inp["dsfr"])
    out, occ, _, cache = model.forward(inp["F"], inp["proj"], inp["f_T"])
    cache["model"] = model
    return (out, occ.prob), cache


def _dsfr_bwd(cache, g):
    gout, gprob = g
    dF, df_T = cache["model"].backward(cache, gout, dprob=gprob)
    return {"F": dF, "f_T": df_T}


def _dsfr_sample(rng):
    def build(r):
        store, params = _dsfr_store(r.child(0))
        proj, f_T, F = _scene_inputs(r, (4, 4, 2), params.channels)
        params.theta.value[...] = r.normal(scale=0.5)
        _, occ, inst, cache = D.Dsfr(params).forward(F, proj, f_T)
        if inst.n_empty == 0 or inst.n_refined == 0:
            return None
        if np.min(np.abs(occ.prob - occ.tau)) < KINK or np.min(np.abs(cache["ccache"]["h"])) < 1e-4:
            return None
        if not _points_ok(cache["rcache"]):
            return None
        return {"F": F, "proj": proj, "f_T": f_T, "dsfr": params}, _params(store)
    return _retry(build, rng)


register_op(DiffOp("dsfr_forward", _dsfr_fwd, _dsfr_bwd, _dsfr_sample, ("F", "f_T")))


# ------------------------------------------------------------------ losses


def _labels(rng, shape, K, ignore_frac=0.1):
    y = rng.integers(0, K, size=shape)
    y[rng.random(shape) < ignore_frac] = L.IGNORE_LABEL
    return y


def _ce_fwd(inp, par):
    loss, grad = L.ce_loss(inp["logits"], inp["labels"])
    return np.array([loss]), grad


register_op(DiffOp(
    "ce_loss", _ce_fwd, lambda grad, g: {"logits": grad * g[0]},
    lambda rng: ({"logits": rng.normal(size=(4, 3, 2, 5)), "labels": _labels(rng, (4, 3, 2), 5)}, {}),
    ("logits",)))


def _occl_fwd(inp, par):
    lp, lr, ls, grad, flags = L.occ_loss(inp["prob"], inp["gt"])
    return np.array([lp, lr, ls]), (grad, flags, inp)


def _occl_bwd(cache, g):
    # per-term gradients, recomputed so each term can be weighted separately
    _, grads, _ = L._ratio_terms(cache[2]["prob"], cache[2]["gt"])
    shape = np.shape(cache[2]["prob"])
    return {"prob": sum(gi * gr for gi, gr in zip(g, grads)).reshape(shape)}


def _occl_sample(rng):
    prob = rng.uniform(0.05, 0.95, size=(4, 4, 2))
    gt = (rng.random((4, 4, 2)) < 0.4).astype(np.float64)
    gt.flat[0], gt.flat[1] = 1.0, 0.0
    return {"prob": prob, "gt": gt}, {}


register_op(DiffOp("occ_loss", _occl_fwd, _occl_bwd, _occl_sample, ("prob",)))


def _aff_fwd(inp, par):
    z, y = inp["logits"], inp["labels"]
    l_sem, l_geo, _, _ = L.affinity_loss(z, y)
    return np.array([l_sem, l_geo]), inp


def _aff_bwd(inp, g):
    # the loss returns d(l_sem + l_geo); split by linearity of the cotangent
    z, y = inp["logits"], inp["labels"]
    sem = L.affinity_loss(z, y)[2]
    geo = _aff_geo_grad(z, y)
    return {"logits": g[0] * (sem - geo) + g[1] * geo}


def _aff_geo_grad(z, y):
    z2 = z.reshape(-1, z.shape[-1])
    yy = np.asarray(y).ravel()
    keep = yy != L.IGNORE_LABEL
    q = softmax(z2[keep], axis=1)
    _, grads, _ = L._ratio_terms(1.0 - q[:, 0], (yy[keep] != 0).astype(np.float64))
    dq = np.zeros_like(q)
    dq[:, 0] = -(grads[0] + grads[1] + grads[2])
    out = np.zeros_like(z2)
    out[keep] = q * (dq - (dq * q).sum(axis=1, keepdims=True))
    return out.reshape(z.shape)


def _aff_sample(rng):
    z = rng.normal(size=(4, 3, 2, 4))
    y = _labels(rng, (4, 3, 2), 4)
    y.flat[:4] = [0, 1, 2, 3]
    return {"logits": z, "labels": y}, {}


register_op(DiffOp("affinity_loss", _aff_fwd, _aff_bwd, _aff_sample, ("logits",)))


def _conv_fwd(inp, par):
    w, b = par["conv.w"].value, par["conv.b"].value
    return D.conv3d(inp["F"], w, b), (inp["F"], par)


def _conv_bwd(cache, g):
    F, par = cache
    dF, dw, db = D.conv3d_backward(F, par["conv.w"].value, np.asarray(g))
    par["conv.w"].grad += dw
    par["conv.b"].grad += db
    return {"F": dF}


def _conv_sample(rng):
    store = ParameterStore(rng.child(0))
    w = store.add("conv.w", (3, 3, 3, 2, 3), scale=10.0)
    b = store.add("conv.b", (3,))
    b.value[...] = rng.normal(size=3)
    return {"F": rng.normal(size=(3, 2, 2, 2))}, {"conv.w": w, "conv.b": b}


register_op(DiffOp("conv3d", _conv_fwd, _conv_bwd, _conv_sample, ("F",)))
