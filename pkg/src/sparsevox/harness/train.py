"""Toy training loop: plain gradient descent on one synthetic scene."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..voxcore import RngStream
from .config import RunConfig
from .pipeline import Model, backward, run_pipeline
from .scene import SyntheticScene, gen_scene


@dataclass
class TrainingCurve:
    records: list = field(default_factory=list)
    aborted: bool = False
    abort_step: int | None = None

    @property
    def l_total(self) -> list[float]:
        return [r["l_total"] for r in self.records]

    @property
    def miou(self) -> list[float]:
        return [r["miou"] for r in self.records]

    def to_json(self) -> str:
        return json.dumps({"aborted": self.aborted, "abort_step": self.abort_step, "records": self.records},
                          indent=2)


def _record(step, res):
    r = res.report
    return {"step": step, "l_total": r.l_total, "l_ssc": r.l_ssc, "l_occ": r.l_occ,
            "iou": res.metrics["iou"], "miou": res.metrics["miou"], "refined": res.inst.n_refined}


def train_toy(cfg: RunConfig, scene: SyntheticScene | None = None, model: Model | None = None) -> TrainingCurve:
    """Runs ``cfg.steps`` updates. Record ``k`` holds the losses before update
    ``k``; one extra record after the last update closes the curve. A
    non-finite loss or gradient stops training and keeps the last finite
    parameters."""
    scene = scene if scene is not None else gen_scene(cfg, RngStream(cfg.seed))
    model = model if model is not None else Model(cfg)
    drop_rng = RngStream(cfg.seed).child(2)
    curve = TrainingCurve()
    params = model.parameters()
    last_good = model.store.state()
    for step in range(cfg.steps + 1):
        model.store.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            res = run_pipeline(scene, model, cfg, drop_rng.child(step))
        if not math.isfinite(res.report.l_total):
            curve.aborted, curve.abort_step = True, step
            model.store.load_state(last_good)
            break
        last_good = model.store.state()
        curve.records.append(_record(step, res))
        if step == cfg.steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            backward(model, res)
        if not all(np.all(np.isfinite(p.grad)) for p in params):
            curve.aborted, curve.abort_step = True, step
            break
        if cfg.lr:
            for p in params:
                p.value -= cfg.lr * p.grad
    model.store.zero_grad()
    return curve
