"""Training objectives and occupancy / semantic IoU metrics.

The precision, recall and specificity terms use soft counts::

    P = sum(p*y) / sum(p)      R = sum(p*y) / sum(y)
    S = sum((1-p)*(1-y)) / sum(1-y)

and each contributes ``-log(max(ratio, EPS))``. A term whose denominator is
zero contributes 0 and is reported in ``flags``.
"""
from __future__ import annotations

from fractions import Fraction

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .voxcore import IGNORE_LABEL, InvalidShape, log_softmax, softmax

EPS = 1e-6
_TINY = 1e-150  # below this 1/num overflows the gradient


@dataclass
class LossReport:
    l_sem: float = 0.0
    l_geo: float = 0.0
    l_ce: float = 0.0
    l_p: float = 0.0
    l_r: float = 0.0
    l_s: float = 0.0
    l_depth: float = 0.0
    depth_enabled: bool = False
    l_ssc: float = field(init=False, default=0.0)
    l_occ: float = field(init=False, default=0.0)
    l_total: float = field(init=False, default=0.0)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.l_ssc = self.l_sem + self.l_geo + self.l_ce + (self.l_depth if self.depth_enabled else 0.0)
        self.l_occ = self.l_p + self.l_r + self.l_s
        self.l_total = self.l_ssc + self.l_occ

    def check_identities(self) -> bool:
        ssc = self.l_sem + self.l_geo + self.l_ce + (self.l_depth if self.depth_enabled else 0.0)
        return (self.l_ssc == ssc and self.l_occ == self.l_p + self.l_r + self.l_s
                and self.l_total == self.l_ssc + self.l_occ)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _flatten(labels):
    lab = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
    return np.asarray(lab, dtype=np.int64).ravel()


# ------------------------------------------------------------------ cross-entropy


def ce_loss(logits, labels, ignore_index: int = IGNORE_LABEL):
    """Mean ``-log softmax(logits)[label]`` over labelled voxels.

    ``logits`` is (V, K) or (X, Y, Z, K). Returns ``(loss, dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    K = z.shape[-1]
    z2 = z.reshape(-1, K)
    y = _flatten(labels)
    if y.size != z2.shape[0]:
        raise InvalidShape(f"{y.size} labels for {z2.shape[0]} voxels")
    keep = y != ignore_index
    n = int(keep.sum())
    grad = np.zeros_like(z2)
    if n == 0:
        return 0.0, grad.reshape(z.shape)
    if y[keep].max() >= K:
        raise InvalidShape("label outside logit classes")
    ls = log_softmax(z2[keep], axis=1)
    rows = np.arange(n)
    loss = -ls[rows, y[keep]].mean()
    g = np.exp(ls)
    g[rows, y[keep]] -= 1.0
    grad[keep] = g / n
    return float(loss), grad.reshape(z.shape)


# ------------------------------------------------------------------ ratio terms


def _ratio_terms(p, y):
    """(l_p, l_r, l_s), gradients w.r.t. p, flags."""
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise InvalidShape(f"prediction shape {p.shape} != target shape {y.shape}")
    inter = (p * y).sum()
    terms, grads, flags = [], [], []
    specs = (
        ("precision", inter, p.sum(), y, np.ones_like(p)),
        ("recall", inter, y.sum(), y, np.zeros_like(p)),
        ("specificity", ((1 - p) * (1 - y)).sum(), (1 - y).sum(), -(1 - y), np.zeros_like(p)),
    )
    for name, num, den, dnum, dden in specs:
        if den <= 0:
            terms.append(0.0)
            grads.append(np.zeros_like(p))
            flags.append(f"{name}_undefined")
            continue
        ratio = num / den
        if ratio < EPS or num < _TINY:
            terms.append(-np.log(EPS))
            grads.append(np.zeros_like(p))
            flags.append(f"{name}_clamped")
            continue
        terms.append(-np.log(ratio))
        # d(-log(num/den)) = -dnum/num + dden/den
        grads.append(-dnum / num + dden / den)
    return terms, grads, flags


def occ_loss(prob, gt_occ):
    """Returns ``(l_p, l_r, l_s, dprob, flags)`` for occupancy probabilities.

    ``gt_occ`` is binary (label != 0). Probabilities are not re-clamped.
    """
    prob = np.asarray(prob, dtype=np.float64)
    (lp, lr, ls), grads, flags = _ratio_terms(prob, gt_occ)
    g = (grads[0] + grads[1] + grads[2]).reshape(prob.shape)
    return float(lp), float(lr), float(ls), g, flags


def occ_loss_masked(prob, labels, ignore_index: int = IGNORE_LABEL):
    y = _flatten(labels)
    keep = y != ignore_index
    p = np.asarray(prob, dtype=np.float64).ravel()
    lp, lr, ls, g, flags = occ_loss(p[keep], (y[keep] != 0).astype(np.float64))
    full = np.zeros_like(p)
    full[keep] = g
    return lp, lr, ls, full.reshape(np.shape(prob)), flags


# ------------------------------------------------------------------ affinity


def affinity_loss(logits, labels, ignore_index: int = IGNORE_LABEL):
    """Scene-class affinity terms ``(l_sem, l_geo, dlogits, flags)``.

    ``l_geo``: ratio terms on the non-empty mass ``1 - softmax(z)_0`` against
    binary occupancy. ``l_sem``: ratio terms of ``softmax(z)_k`` against
    ``label == k``, averaged over the classes present in the labels.
    """
    z = np.asarray(logits, dtype=np.float64)
    K = z.shape[-1]
    z2 = z.reshape(-1, K)
    y = _flatten(labels)
    keep = y != ignore_index
    q = softmax(z2[keep], axis=1)
    yk = y[keep]
    dq = np.zeros_like(q)

    terms, grads, f = _ratio_terms(1.0 - q[:, 0], (yk != 0).astype(np.float64))
    l_geo = float(sum(terms))
    dq[:, 0] -= grads[0] + grads[1] + grads[2]
    flags = [f"geo_{x}" for x in f]

    present = np.unique(yk)
    l_sem = 0.0
    for k in present:
        terms, grads, f = _ratio_terms(q[:, k], (yk == k).astype(np.float64))
        l_sem += sum(terms) / present.size
        dq[:, k] += (grads[0] + grads[1] + grads[2]) / present.size
        flags += [f"sem{int(k)}_{x}" for x in f]

    grad = np.zeros_like(z2)
    grad[keep] = q * (dq - (dq * q).sum(axis=1, keepdims=True))
    return float(l_sem), l_geo, grad.reshape(z.shape), flags


# ------------------------------------------------------------------ metrics


def iou_miou(pred, gt, n_classes: int, ignore_index: int = IGNORE_LABEL):
    """Binary-occupancy IoU, per-class IoU for classes 1..K-1, and their mean.

    Classes absent from both prediction and ground truth get NaN and are
    left out of the mean.
    """
    p = _flatten(pred)
    g = _flatten(gt)
    if p.shape != g.shape:
        raise InvalidShape("prediction and ground truth differ in shape")
    keep = g != ignore_index
    p, g = p[keep], g[keep]
    po, go = p != 0, g != 0
    union = np.count_nonzero(po | go)
    iou = np.count_nonzero(po & go) / union if union else 1.0
    per_class = np.full(n_classes - 1, np.nan)
    for k in range(1, n_classes):
        pk, gk = p == k, g == k
        u = np.count_nonzero(pk | gk)
        if u:
            per_class[k - 1] = np.count_nonzero(pk & gk) / u
    valid = ~np.isnan(per_class)
    # correctly rounded mean, so the value does not depend on summation order
    miou = float(sum(map(Fraction, per_class[valid])) / int(valid.sum())) if valid.any() else float("nan")
    return float(iou), per_class, miou
