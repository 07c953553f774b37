"""The numba and numpy kernel paths must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vabal import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2), st.data())
def test_block_energies_and_labels(nc, d, code, data):
    z = data.draw(arrays(np.float64, (7, nc * d), elements=st.floats(-4, 4)))
    np.testing.assert_allclose(K.block_energies_nb(z, nc, d, code), K.block_energies_np(z, nc, d, code),
                               rtol=1e-12, atol=1e-12)
    assert np.array_equal(K.latent_labels_nb(z, nc, d, code), K.latent_labels_np(z, nc, d, code))


def test_latent_label_tie_goes_to_lowest_index():
    z = np.zeros((1, 6))
    for fn in (K.latent_labels_np, K.latent_labels_nb):
        assert fn(z, 3, 2, 0)[0] == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.data())
def test_tally(nc, n, draws, data):
    pred = data.draw(arrays(np.int64, (n, draws), elements=st.integers(0, nc - 1)))
    labels = data.draw(arrays(np.int64, n, elements=st.integers(0, nc - 1)))
    a = K.tally_np(pred, labels, nc)
    assert np.array_equal(a, K.tally_nb(pred, labels, nc))
    assert a.sum() == n * draws


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.integers(1, 5), elements=st.integers(0, 20)), st.integers(0, 40))
def test_water_fill(counts, budget):
    assert np.array_equal(K.water_fill_np(counts, budget), K.water_fill_nb(counts, budget))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.data())
def test_projected_gradient(k, data):
    m = data.draw(arrays(np.float64, (k, k), elements=st.floats(-2, 2)))
    A = m @ m.T + np.eye(k)
    b = data.draw(arrays(np.float64, k, elements=st.floats(-5, 5)))
    x0 = np.abs(data.draw(arrays(np.float64, k, elements=st.floats(0, 3))))
    step = 1.0 / np.linalg.norm(A, 2)
    xa, ia, ta = K.projected_gradient_np(A, b, 0.0, x0, step, 500, 1e-8)
    xb, ib, tb = K.projected_gradient_nb(A, b, 0.0, x0, step, 500, 1e-8)
    assert ia == ib
    np.testing.assert_allclose(xa, xb, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(ta, tb, rtol=1e-9, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_round_and_fix(data):
    k = data.draw(st.integers(1, 5))
    available = data.draw(arrays(np.int64, k, elements=st.integers(0, 8)))
    budget = data.draw(st.integers(0, int(available.sum())))
    xhat = data.draw(arrays(np.float64, k, elements=st.floats(0, 10)))
    assert np.array_equal(K.round_and_fix_np(xhat, budget, available), K.round_and_fix_nb(xhat, budget, available))


def test_env_flag_selects_numpy_backend():
    code = "from vabal import _kernels as K; print(K.BACKEND, K.water_fill is K.water_fill_np)"
    env = dict(os.environ, VABAL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
    env["VABAL_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numba", "False"]


def test_unknown_variant():
    with pytest.raises(ValueError, match="w-variant"):
        K.variant_code("cube")
