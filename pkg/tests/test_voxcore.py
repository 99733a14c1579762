import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsevox.voxcore import (DEFAULT_CLASSES, DiffOp, InvalidShape, LabelGrid, NotRegistered, NumericalFailure,
                               ParameterStore, RngStream, get_op, load_array, register_op, registered_ops,
                               save_array, sigmoid, softmax, vjp_check)


def test_rng_same_seed_same_draws():
    a, b = RngStream(5), RngStream(5)
    assert np.array_equal(a.normal(size=10), b.normal(size=10))
    assert not np.array_equal(RngStream(5).normal(size=10), RngStream(6).normal(size=10))


def test_rng_children_independent_of_parent_use():
    a = RngStream(9)
    a.normal(size=100)
    assert np.array_equal(a.child(3).random(4), RngStream(9).child(3).random(4))
    assert not np.array_equal(a.child(3).random(4), a.child(4).random(4))


def test_param_init_bit_identical():
    def make(seed):
        s = ParameterStore(RngStream(seed))
        s.add("w", (3, 4))
        s.add("b", (4,), kind="bias")
        return s.state()

    x, y = make(2), make(2)
    assert all(np.array_equal(x[k], y[k]) for k in x)
    assert np.all(x["b"] == 0)


def test_param_store_rejects_duplicates():
    s = ParameterStore()
    s.add("w", (2,))
    with pytest.raises(KeyError):
        s.add("w", (2,))


def test_grad_accumulates_until_zeroed():
    s = ParameterStore()
    p = s.add("w", (2,))
    p.grad += 1.0
    p.grad += 1.0
    assert np.all(p.grad == 2.0)
    s.zero_grad()
    assert np.all(p.grad == 0.0)


def test_label_grid_validation():
    with pytest.raises(ValueError):
        LabelGrid(np.full((2, 2, 2), 9))
    g = LabelGrid(np.array([[[0, 5], [255, 1]]]))
    assert g.present() == [0, 1, 5]
    assert g.occupancy().sum() == 2
    assert DEFAULT_CLASSES.is_foreground(5) and not DEFAULT_CLASSES.is_foreground(0)


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(4)), 0.25, atol=0, rtol=0)
    np.testing.assert_allclose(softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] < 1e-300
    with pytest.raises(InvalidShape):
        softmax(np.zeros(0))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(x, c):
    y = softmax(x)
    assert np.all(y >= 0)
    assert abs(y.sum() - 1) < 1e-12
    np.testing.assert_allclose(softmax(x + c), y, atol=1e-12)


def test_sigmoid_stable():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0


def test_vxg_roundtrip(tmp_path, nprng):
    a = nprng.normal(size=(3, 4, 2))
    save_array(tmp_path / "a.vxg", a)
    raw = (tmp_path / "a.vxg").read_bytes()
    assert raw[:4] == b"VXG1"
    assert struct.unpack_from("<4I", raw, 4) == (3, 3, 4, 2)
    b = load_array(tmp_path / "a.vxg")
    assert b.shape == a.shape and np.array_equal(a, b)


def test_vxg_rejects_bad_files(tmp_path):
    (tmp_path / "x.vxg").write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ValueError):
        load_array(tmp_path / "x.vxg")
    (tmp_path / "y.vxg").write_bytes(b"VXG1" + struct.pack("<II", 1, 3) + b"\0" * 16)
    with pytest.raises(ValueError):
        load_array(tmp_path / "y.vxg")


def test_reshape_roundtrip(nprng):
    a = nprng.normal(size=(2, 3, 4))
    assert np.array_equal(a.reshape(-1).reshape(2, 3, 4), a)
    idx = np.unravel_index(np.arange(a.size), a.shape)
    assert np.array_equal(a[idx], a.ravel())


def test_vjp_linear_exact():
    assert vjp_check("linear3x", probe=RngStream(0)) < 1e-9


def test_sigmoid_grad_at_zero():
    op = get_op("sigmoid")
    x = {"x": np.zeros(1)}
    y, cache = op.forward(x, {})
    assert op.backward(cache, np.ones(1))["x"][0] == 0.25
    h = 1e-5
    fd = (sigmoid(h) - sigmoid(-h)) / (2 * h)
    assert abs(fd - 0.25) < 1e-8
    assert vjp_check("sigmoid", inputs=x, params={}) < 1e-8


def test_vjp_errors():
    with pytest.raises(NotRegistered):
        vjp_check("no-such-op")
    register_op(DiffOp("_nan", lambda i, p: (np.full_like(i["x"], np.nan), None), lambda c, g: {"x": g},
                       lambda r: ({"x": np.ones(2)}, {}), ("x",)))
    with pytest.raises(NumericalFailure):
        vjp_check("_nan")


def test_registry_lists_pipeline_ops():
    ops = set(registered_ops())
    assert {"softmax", "grid_sample", "roi_pool", "tgif_apply", "classify_occupancy", "refine_empty",
            "refine_occupied", "dsfr_forward", "ce_loss", "occ_loss", "affinity_loss", "lift"} <= ops
