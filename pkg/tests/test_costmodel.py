import json
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevox import costmodel as cm
from sparsevox.dsfr import Instrumentation
from sparsevox.harness.cli import default_cost_config

ROOT = Path(__file__).resolve().parents[1]


def test_attention_scales_linearly():
    cfg = cm.CostConfig(occupancy=0.13)
    d, s = cm.cost(cfg, "dense"), cm.cost(cfg, "sparsity-aware")
    assert s.attention_flops / d.attention_flops == pytest.approx(0.13, rel=1e-15)
    full = replace(cfg, occupancy=1.0)
    assert cm.cost(full, "sparsity-aware").attention_flops == cm.cost(full, "dense").attention_flops


def test_components_sum_to_total():
    for strategy in cm.STRATEGIES:
        r = cm.cost(cm.CostConfig(), strategy)
        assert r.total_flops == r.attention_flops + r.classifier_flops + r.blend_flops + r.shared_flops
        assert 0 <= r.attention_ratio <= 1


def test_invalid():
    with pytest.raises(ValueError):
        cm.CostConfig(occupancy=1.5)
    with pytest.raises(ValueError):
        cm.CostConfig(dims=(0, 1, 1))
    with pytest.raises(ValueError):
        cm.cost(cm.CostConfig(), "bogus")


_fields = ("channels", "heads", "points", "classifier_width", "ffn_width", "n_classes")


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(_fields + ("dims", "occupancy")), st.integers(0, 10_000))
def test_monotone(field, seed):
    import numpy as np
    r = np.random.default_rng(seed)
    base = cm.CostConfig(dims=tuple(int(x) for x in r.integers(1, 20, 3)), channels=int(r.integers(1, 64)),
                         heads=int(r.integers(1, 8)), points=int(r.integers(1, 8)),
                         classifier_width=int(r.integers(1, 16)), ffn_width=int(r.integers(1, 64)),
                         n_classes=int(r.integers(2, 20)), occupancy=float(r.uniform(0, 0.9)))
    if field == "dims":
        bigger = replace(base, dims=(base.dims[0] + 1, base.dims[1], base.dims[2]))
    elif field == "occupancy":
        bigger = replace(base, occupancy=min(1.0, base.occupancy + 0.05))
    else:
        bigger = replace(base, **{field: getattr(base, field) + 1})
    for s in cm.STRATEGIES:
        a, b = cm.cost(base, s), cm.cost(bigger, s)
        assert b.total_flops >= a.total_flops
        assert b.attention_flops >= a.attention_flops


def test_config_text_roundtrip(tmp_path):
    cfg = cm.CostConfig(dims=(3, 4, 5), occupancy=0.25, empty_fraction=0.5)
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert cm.CostConfig.load(tmp_path / "c.cfg") == cfg


def test_frozen_config_matches_search():
    cfg, _ = cm.search_calibration()
    assert cm.CostConfig.load(ROOT / "configs" / "reference.cfg") == cfg
    assert default_cost_config() == cfg


def test_frozen_metrics():
    m = cm.reference_metrics(default_cost_config())
    assert round(m["dense_total_g"], 2) == 30.96
    assert round(m["dense_attention_g"], 3) == 24.512


def test_verify_instrumentation_extremes():
    cfg = cm.CostConfig(dims=(2, 2, 2), heads=3, points=5)
    none = Instrumentation(n_voxels=8, n_empty=8, n_refined=0, sample_calls=0)
    ok, d = cm.verify_against_instrumentation(cm.cost(cm.config_from_instrumentation(cfg, none)), none)
    assert ok and d["predicted_sample_calls"] == 0
    full = Instrumentation(n_voxels=8, n_empty=0, n_refined=8, sample_calls=8 * 15)
    sub = cm.config_from_instrumentation(cfg, full)
    ok, d = cm.verify_against_instrumentation(cm.cost(sub), full, cm.cost(sub, "dense"), 1.0)
    assert ok and d["measured_sample_calls"] == 120
    bad = Instrumentation(n_voxels=8, n_empty=0, n_refined=8, sample_calls=7)
    ok, d = cm.verify_against_instrumentation(cm.cost(sub), bad)
    assert not ok and d["predicted_sample_calls"] == 120 and d["measured_sample_calls"] == 7


def test_report_json():
    out = json.loads(cm.report_json(cm.CostConfig()))
    assert set(out) == {"dense", "sparsity-aware", "total_reduction_pct", "attention_reduction_pct"}
    assert json.loads(cm.report_json(cm.CostConfig(), "dense"))["strategy"] == "dense"
