"""Analytical FLOPs model for dense versus occupancy-routed refinement.

Conventions: a multiply-add is 2 FLOPs, a bias add or ReLU 1 FLOP, and every
sigmoid / softmax / exp element 4 FLOPs. A linear map ``in -> out`` costs
``2*in*out + out``.

Per refined voxel the deformable attention charges the offset and weight
projections, the softmax, the sampling-location adds, ``H*S`` bilinear reads
of ``C`` channels (four multiply-adds each), the weighted aggregation, the
head reduction and the fusion projection. The occupancy classifier runs on
every voxel of the sparse path; the dummy blend runs on its empty voxels.
``shared`` is the per-voxel work both strategies do (feed-forward block and
class head).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

MAC = 2
ACT = 4

# reference FLOP targets (GFLOPs)
REF_DENSE_TOTAL = 30.96
REF_DENSE_ATTENTION = 24.512
REF_SPARSE_TOTAL = 8.694
REF_SPARSE_ATTENTION = 0.377
REF_OCCUPANCY = REF_SPARSE_ATTENTION / REF_DENSE_ATTENTION

STRATEGIES = ("dense", "sparsity-aware")


@dataclass(frozen=True)
class CostConfig:
    dims: tuple[int, int, int] = (16, 16, 4)
    channels: int = 16
    heads: int = 4
    points: int = 4
    classifier_width: int = 16
    ffn_width: int = 32
    n_classes: int = 9
    occupancy: float = 0.07
    empty_fraction: float | None = None  # defaults to 1 - occupancy

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("dims must be three positive ints")
        for name in ("channels", "heads", "points", "classifier_width", "ffn_width", "n_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError("occupancy must lie in [0, 1]")
        if self.empty_fraction is not None and not 0.0 <= self.empty_fraction <= 1.0:
            raise ValueError("empty_fraction must lie in [0, 1]")

    @property
    def n_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    # key=value persistence ------------------------------------------------

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "dims":
                v = "x".join(str(d) for d in v)
            out.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> CostConfig:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        args = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            if f.name == "dims":
                args[f.name] = tuple(int(x) for x in v.lower().split("x"))
            elif f.name in ("occupancy", "empty_fraction"):
                args[f.name] = float(v)
            else:
                args[f.name] = int(v)
        return cls(**args)

    @classmethod
    def load(cls, path) -> CostConfig:
        return cls.from_text(Path(path).read_text())


@dataclass
class CostReport:
    strategy: str
    total_flops: float
    attention_flops: float
    classifier_flops: float
    blend_flops: float
    shared_flops: float
    attention_ratio: float
    refined_voxels: int
    sample_calls: int

    def to_dict(self) -> dict:
        return asdict(self)


def linear_flops(n_in: int, n_out: int) -> int:
    return MAC * n_in * n_out + n_out


def attention_flops_per_voxel(cfg: CostConfig) -> int:
    C, H, S = cfg.channels, cfg.heads, cfg.points
    HS = H * S
    return (linear_flops(C, 2 * HS)        # offsets
            + linear_flops(C, HS)          # attention logits
            + ACT * HS                     # softmax
            + 2 * HS                       # reference point + offset
            + MAC * 4 * C * HS             # bilinear reads
            + MAC * C * HS                 # weighted aggregation
            + linear_flops(H * C, C)       # head reduction
            + linear_flops(2 * C, C))      # fusion


def classifier_flops_per_voxel(cfg: CostConfig) -> int:
    C, Ch = cfg.channels, cfg.classifier_width
    return (MAC * 27 * C * Ch + Ch        # 3x3x3 conv + bias
            + Ch                          # relu
            + linear_flops(Ch, 1)         # 1x1x1 conv
            + ACT                         # sigmoid
            + 1)                          # threshold compare


def blend_flops_per_voxel(cfg: CostConfig) -> int:
    # F*p + Em*(1-p): two products and one add per channel, plus 1 - p
    return 3 * cfg.channels + 1


def shared_flops_per_voxel(cfg: CostConfig) -> int:
    C, Fw = cfg.channels, cfg.ffn_width
    return (linear_flops(C, Fw) + Fw + linear_flops(Fw, C) + C
            + linear_flops(C, cfg.n_classes))


def cost(cfg: CostConfig, strategy: str = "sparsity-aware") -> CostReport:
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    V = cfg.n_voxels
    shared = V * shared_flops_per_voxel(cfg)
    if strategy == "dense":
        frac, cls, bl = 1.0, 0.0, 0.0
    else:
        frac = cfg.occupancy
        empty = 1.0 - frac if cfg.empty_fraction is None else cfg.empty_fraction
        cls = V * classifier_flops_per_voxel(cfg)
        bl = empty * V * blend_flops_per_voxel(cfg)
    attn = frac * V * attention_flops_per_voxel(cfg)
    total = shared + attn + cls + bl
    refined = int(round(frac * V))
    return CostReport(strategy, total, attn, cls, bl, shared,
                      attn / total if total else 0.0, refined, refined * cfg.heads * cfg.points)


def compare(cfg: CostConfig) -> dict:
    dense = cost(cfg, "dense")
    sparse = cost(cfg, "sparsity-aware")
    return {
        "dense": dense.to_dict(),
        "sparsity-aware": sparse.to_dict(),
        "total_reduction_pct": 100.0 * (1.0 - sparse.total_flops / dense.total_flops),
        "attention_reduction_pct": 100.0 * (1.0 - sparse.attention_flops / dense.attention_flops)
        if dense.attention_flops else 0.0,
    }


def config_from_instrumentation(base: CostConfig, inst) -> CostConfig:
    """Cost config describing one measured routing decision."""
    V = inst.n_voxels
    return replace(base, occupancy=inst.n_refined / V, empty_fraction=inst.n_empty / V)


def verify_against_instrumentation(report: CostReport, inst, dense: CostReport | None = None,
                                   occupancy: float | None = None):
    """Check predicted sample calls against measured ones.

    Returns ``(ok, detail)``. When ``dense`` and ``occupancy`` are given the
    attention ratio sparse/dense must also equal the occupancy.
    """
    detail = {"predicted_sample_calls": report.sample_calls, "measured_sample_calls": inst.sample_calls}
    ok = report.sample_calls == inst.sample_calls
    if dense is not None and occupancy is not None and dense.attention_flops:
        ratio = report.attention_flops / dense.attention_flops
        detail["attention_ratio"] = ratio
        ok = ok and math.isclose(ratio, occupancy, rel_tol=1e-12, abs_tol=1e-15)
    return ok, detail


# ------------------------------------------------------------------ calibration


def reference_metrics(cfg: CostConfig) -> dict:
    d = cost(replace(cfg, occupancy=REF_OCCUPANCY), "dense")
    s = cost(replace(cfg, occupancy=REF_OCCUPANCY), "sparsity-aware")
    return {
        "dense_total_g": d.total_flops / 1e9,
        "dense_attention_g": d.attention_flops / 1e9,
        "sparse_total_g": s.total_flops / 1e9,
        "sparse_attention_g": s.attention_flops / 1e9,
        "total_reduction_pct": 100 * (1 - s.total_flops / d.total_flops),
        "attention_reduction_pct": 100 * (1 - s.attention_flops / d.attention_flops),
        "dense_ratio_pct": 100 * d.attention_ratio,
        "sparse_ratio_pct": 100 * s.attention_ratio,
    }


def _reference_score(m: dict) -> float:
    # each deviation as a fraction of its acceptance band
    return max(
        abs(m["sparse_total_g"] / REF_SPARSE_TOTAL - 1) / 0.02,
        abs(m["sparse_attention_g"] / REF_SPARSE_ATTENTION - 1) / 0.01,
        abs(m["total_reduction_pct"] - 71.9) / 0.5,
        abs(m["attention_reduction_pct"] - 98.5) / 0.1,
        abs(m["dense_ratio_pct"] - 79.2) / 0.5,
        abs(m["sparse_ratio_pct"] - 4.3) / 0.5,
    )


def search_calibration(channels=range(32, 257, 32), heads=(1, 2, 4, 8), points=(1, 2, 4, 8),
                       z_range=range(4, 33), x_range=range(8, 257), n_classes: int = 20,
                       attention_tol_g: float = 4e-4, total_tol_g: float = 5e-3):
    """Constrained search for a configuration whose dense totals round to the
    30.96 / 24.512 GFLOPs targets; ranks feasible configs by the worst
    deviation from the reference targets. Returns ``(config, metrics)``."""
    best = None
    probe = CostConfig(n_classes=n_classes, occupancy=REF_OCCUPANCY)
    for C in channels:
        for H in heads:
            for S in points:
                c0 = replace(probe, channels=C, heads=H, points=S, classifier_width=1, ffn_width=1)
                A = attention_flops_per_voxel(c0)
                for Z in z_range:
                    for X in x_range:
                        Y = round(REF_DENSE_ATTENTION * 1e9 / (A * X * Z))
                        if not 8 <= Y <= 256:
                            continue
                        V = X * Y * Z
                        if abs(V * A - REF_DENSE_ATTENTION * 1e9) > attention_tol_g * 1e9:
                            continue
                        # shared cost is affine in ffn_width; solve, then round
                        s0 = shared_flops_per_voxel(c0)
                        s1 = shared_flops_per_voxel(replace(c0, ffn_width=2)) - s0
                        target = (REF_DENSE_TOTAL - REF_DENSE_ATTENTION) * 1e9 / V
                        Fw = round(1 + (target - s0) / s1)
                        if Fw < 1:
                            continue
                        cfg = replace(c0, dims=(X, Y, Z), ffn_width=Fw)
                        if abs(cost(cfg, "dense").total_flops - REF_DENSE_TOTAL * 1e9) > total_tol_g * 1e9:
                            continue
                        k0 = classifier_flops_per_voxel(cfg)
                        k1 = classifier_flops_per_voxel(replace(cfg, classifier_width=2)) - k0
                        over = (REF_SPARSE_TOTAL - REF_SPARSE_ATTENTION) * 1e9 / V \
                            - shared_flops_per_voxel(cfg) - (1 - REF_OCCUPANCY) * blend_flops_per_voxel(cfg)
                        x = 1 + (over - k0) / k1
                        for Ch in {max(1, math.floor(x)), max(1, math.ceil(x))}:
                            cand = replace(cfg, classifier_width=Ch)
                            m = reference_metrics(cand)
                            score = _reference_score(m)
                            if best is None or score < best[0]:
                                best = (score, cand, m)
    if best is None:
        raise RuntimeError("no feasible calibration in the search space")
    return best[1], best[2]


def report_json(cfg: CostConfig, strategy: str | None = None) -> str:
    if strategy is None or strategy == "both":
        return json.dumps(compare(cfg), indent=2)
    return json.dumps(cost(cfg, strategy).to_dict(), indent=2)
