import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevox import kernels

py = kernels.python
cc = kernels.compiled
needs_cc = pytest.mark.skipif(cc is None, reason="compiled backend not built")


def _case(seed):
    r = np.random.default_rng(seed)
    H, W, C = 5, 7, 3
    fmap = r.normal(size=(H, W, C))
    u = r.uniform(-2, W + 1, 40)
    v = r.uniform(-2, H + 1, 40)
    u[:5] = np.arange(5)  # exact nodes
    v[:5] = np.arange(5) % H
    return r, fmap, u, v


def test_selected_backend_matches_env():
    assert kernels.BACKEND in ("cython", "python")
    if cc is not None:
        assert kernels.backend is cc


def test_fallback_forced_by_env():
    env = dict(os.environ, SPARSEVOX_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from sparsevox import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_cc
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_bilinear_backends_agree(seed):
    r, fmap, u, v = _case(seed)
    np.testing.assert_allclose(cc.bilinear_sample(fmap, u, v), py.bilinear_sample(fmap, u, v), atol=1e-13)
    g = r.normal(size=(u.size, fmap.shape[2]))
    for a, b in zip(cc.bilinear_backward(fmap, u, v, g), py.bilinear_backward(fmap, u, v, g)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_cc
@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_deform_backends_agree(seed):
    r, fmap, _, _ = _case(seed)
    n, Hh, S = 6, 2, 3
    u = r.uniform(0, 6, n)
    v = r.uniform(0, 4, n)
    off = r.normal(scale=2, size=(n, Hh, S, 2))
    att = r.dirichlet(np.ones(S), size=(n, Hh))
    np.testing.assert_allclose(cc.deform_aggregate(fmap, u, v, off, att), py.deform_aggregate(fmap, u, v, off, att),
                               atol=1e-13)
    g = r.normal(size=(n, Hh, fmap.shape[2]))
    for a, b in zip(cc.deform_aggregate_backward(fmap, u, v, off, att, g),
                    py.deform_aggregate_backward(fmap, u, v, off, att, g)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_cc
def test_linear_rows_agree_and_batch_invariant():
    r = np.random.default_rng(3)
    X = r.normal(size=(50, 7))
    W = r.normal(size=(7, 5))
    b = r.normal(size=5)
    for mod in (py, cc):
        full = mod.linear_rows(X, W, b)
        sub = mod.linear_rows(X[[3, 17, 40]], W, b)
        assert np.array_equal(full[[3, 17, 40]], sub)
    np.testing.assert_allclose(cc.linear_rows(X, W, b), py.linear_rows(X, W, b), atol=1e-13)


@needs_cc
@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_raycast_backends_agree(seed):
    r = np.random.default_rng(seed)
    occ = r.random((6, 5, 4)) < 0.15
    o = np.array([0.3, -2.0, 1.5])
    d = r.normal(size=(64, 3))
    d[:, 1] = np.abs(d[:, 1]) + 0.2
    ha, ta = cc.raycast(occ, np.zeros(3), 0.5, o, d)
    hb, tb = py.raycast(occ, np.zeros(3), 0.5, o, d)
    assert np.array_equal(ha, hb)
    np.testing.assert_allclose(ta, tb, atol=1e-12)


def test_bilinear_nodes_and_padding():
    _, fmap, _, _ = _case(0)
    for mod in filter(None, (py, cc)):
        assert np.array_equal(mod.bilinear_sample(fmap, np.array([2.0]), np.array([3.0]))[0], fmap[3, 2])
        assert np.all(mod.bilinear_sample(fmap, np.array([-10.0]), np.array([-10.0])) == 0)
