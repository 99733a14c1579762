"""End-to-end forward and backward: dropout, text filter, lifting,
occupancy-routed refinement, a linear class head and the losses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import losses as L
from ..dsfr import Dsfr, DsfrParams, Instrumentation, OccupancyField, refine_dense
from ..fgdrop import DropoutConfig, drop_foreground
from ..lift3d import FeatureVolume, LiftGeometry, Lifter
from ..tgif import TextGuidedFilter
from ..voxcore import InvalidShape, LabelGrid, ParameterStore, RngStream
from .config import RunConfig
from .scene import SyntheticScene


class Model:
    """All learnable state of the pipeline, in one parameter store."""

    def __init__(self, cfg: RunConfig, rng: RngStream | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else RngStream(cfg.seed).child(100)
        self.store = ParameterStore(rng)
        C, K = cfg.channels, cfg.n_classes
        self.tgif = TextGuidedFilter(self.store, K, C, token_dim=cfg.token_dim, use_layer_norm=cfg.use_layer_norm)
        self.lifter = Lifter(self.store, C)
        self.dsfr = DsfrParams(self.store, C, cfg.heads, cfg.points, cfg.classifier_width)
        self.head_w = self.store.add("head.w", (C, K), scale=1.0 / (0.02 * np.sqrt(C)))
        self.head_b = self.store.add("head.b", (K,), kind="bias")

    def parameters(self):
        return list(self.store)


@dataclass
class PipelineResult:
    pred: LabelGrid
    report: L.LossReport
    metrics: dict
    inst: Instrumentation
    occ: OccupancyField
    logits: np.ndarray
    cache: dict = field(default=None, repr=False)

    def to_json(self) -> str:
        m = dict(self.metrics)
        m["per_class_iou"] = [None if np.isnan(x) else float(x) for x in m["per_class_iou"]]
        return json.dumps({"losses": self.report.to_dict(), "metrics": m,
                           "instrumentation": json.loads(self.inst.to_json())}, indent=2)


def _geometry(scene: SyntheticScene, cfg: RunConfig, cache: dict):
    # depends only on the scene, so it is computed once per scene object
    key = (id(scene), cfg.depth_bins)
    if cache.get("key") != key:
        cache["key"] = key
        cache["geom"] = LiftGeometry.build(scene.spec, scene.camera, scene.depth_volume(cfg.depth_bins))
    return cache["geom"]


_GEOM_CACHE: dict = {}


def run_pipeline(scene: SyntheticScene, model: Model, cfg: RunConfig, rng: RngStream | None = None,
                 mode: str = "sparse", inject_logits=None) -> PipelineResult:
    """One forward pass. ``mode="dense"`` refines every voxel by deformable
    attention (the reference the routed path is compared against).
    ``inject_logits`` replaces the head output, e.g. with oracle scores."""
    if mode not in ("sparse", "dense"):
        raise ValueError("mode must be 'sparse' or 'dense'")
    if scene.features.shape[2] != cfg.channels:
        raise InvalidShape(f"scene features have {scene.features.shape[2]} channels, cfg says {cfg.channels}")
    if tuple(scene.labels.shape) != tuple(cfg.dims):
        raise InvalidShape("scene grid does not match cfg.dims")
    rng = rng if rng is not None else RngStream(cfg.seed).child(1)
    gt = scene.labels
    target, prompt, dropped = drop_foreground(gt, DropoutConfig(cfg.dropout_p), rng, cfg.token_dim)

    tg = model.tgif
    tokens, ecache = tg.encode_prompt(prompt)
    f_T, acache = tg.apply(scene.features, tokens)

    geom = _geometry(scene, cfg, _GEOM_CACHE)
    F, lcache = model.lifter.forward(f_T, geom)
    X, Y, Z = cfg.dims
    C, K = cfg.channels, cfg.n_classes
    net = Dsfr(model.dsfr)
    out, occ, inst, dcache = net.forward(F.reshape(X, Y, Z, C), geom.proj, f_T)
    if mode == "dense":
        out = refine_dense(FeatureVolume(F.reshape(X, Y, Z, C), geom.valid.reshape(X, Y, Z)),
                           geom.proj, f_T, model.dsfr)

    logits = out @ model.head_w.value + model.head_b.value
    if inject_logits is not None:
        logits = np.asarray(inject_logits, dtype=np.float64).reshape(-1, K)

    l_ce, g_ce = L.ce_loss(logits, target)
    l_sem, l_geo, g_aff, aff_flags = L.affinity_loss(logits, target)
    l_p, l_r, l_s, g_prob, occ_flags = L.occ_loss_masked(occ.prob, target)
    report = L.LossReport(l_sem=l_sem, l_geo=l_geo, l_ce=l_ce, l_p=l_p, l_r=l_r, l_s=l_s,
                          depth_enabled=cfg.depth_loss, flags=aff_flags + occ_flags)

    pred = LabelGrid(np.argmax(logits, axis=1).reshape(cfg.dims), gt.class_table)
    iou, per_class, miou = L.iou_miou(pred, gt, K)
    t_iou, _, t_miou = L.iou_miou(pred, target, K)
    metrics = {"iou": iou, "miou": miou, "per_class_iou": per_class, "target_iou": t_iou, "target_miou": t_miou,
               "prompt": prompt.render(gt.class_table), "dropped": list(dropped)}
    cache = dict(ecache=ecache, acache=acache, lcache=lcache, dcache=dcache, net=net, out=out,
                 g_logits=g_ce + g_aff, g_prob=g_prob, mode=mode, injected=inject_logits is not None)
    return PipelineResult(pred, report, metrics, inst, occ, logits, cache)


def backward(model: Model, res: PipelineResult) -> None:
    """Accumulate d l_total / d parameter into every ``Parameter.grad``."""
    c = res.cache
    if c["mode"] != "sparse" or c["injected"]:
        raise ValueError("backward is defined for the routed path with the learned head")
    g = c["g_logits"]
    model.head_w.grad += c["out"].T @ g
    model.head_b.grad += g.sum(axis=0)
    d_out = g @ model.head_w.value.T
    dF, df_T = c["net"].backward(c["dcache"], d_out, dprob=c["g_prob"])
    df_T = df_T + model.lifter.backward(c["lcache"], dF)
    _, d_tokens = model.tgif.apply_backward(c["acache"], df_T)
    model.tgif.encode_backward(c["ecache"], d_tokens)
