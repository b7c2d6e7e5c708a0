"""The compiled kernels and the numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdanet import _kernels_py as py
from sdanet import kernels

cy = pytest.importorskip("sdanet._ckernels")

shapes4 = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4).map(lambda v: 2 * v),
                    st.integers(1, 4).map(lambda v: 2 * v))
floats = st.floats(-10, 10, width=32)


@settings(max_examples=30, deadline=None)
@given(st.data(), st.sampled_from([1, 3]))
def test_im2col_col2im_parity(data, k):
    x = data.draw(arrays(np.float32, shapes4, elements=floats))
    cols_py, cols_cy = py.im2col(x, k), cy.im2col(x, k)
    np.testing.assert_array_equal(cols_py, cols_cy)
    np.testing.assert_array_equal(py.col2im(cols_py, x.shape, k), cy.col2im(cols_py, x.shape, k))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, shapes4, elements=floats))
def test_maxpool_parity(x):
    out_py, idx_py = py.maxpool2x2_forward(x)
    out_cy, idx_cy = cy.maxpool2x2_forward(x)
    np.testing.assert_array_equal(out_py, out_cy)
    np.testing.assert_array_equal(idx_py, idx_cy)
    g = np.ascontiguousarray(out_py * 2 + 1)
    np.testing.assert_array_equal(py.maxpool2x2_backward(g, idx_py), cy.maxpool2x2_backward(g, idx_py))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.integers(1, 300), elements=floats), st.sampled_from([0.0, 0.01, 0.2, 1.0]))
def test_leaky_relu_parity(x, slope):
    np.testing.assert_array_equal(py.leaky_relu_forward(x, slope), cy.leaky_relu_forward(x, slope))
    g = x[::-1].copy()
    np.testing.assert_array_equal(py.leaky_relu_backward(x, g, slope), cy.leaky_relu_backward(x, g, slope))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(2, 64)), elements=floats))
def test_instance_norm_parity(rows):
    a, inv_a = py.instance_norm_forward(rows, 1e-5)
    b, inv_b = cy.instance_norm_forward(rows, 1e-5)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(inv_a, inv_b, rtol=1e-10)
    g = rows[:, ::-1].copy()
    np.testing.assert_allclose(py.instance_norm_backward(g, a, inv_a), cy.instance_norm_backward(g, a, inv_a),
                               rtol=1e-4, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=floats))
def test_median_parity(img):
    np.testing.assert_array_equal(py.median3x3(img), cy.median3x3(img))


def test_float64_inputs_supported():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    for fn in (lambda m: m.im2col(x, 3), lambda m: m.maxpool2x2_forward(x)[0]):
        np.testing.assert_array_equal(fn(py), fn(cy))


def test_backend_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")
    code = "import sdanet.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, SDANET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_pure_python_backend_runs_network():
    """The whole forward pass works on the fallback and agrees with the default backend."""
    code = (
        "import numpy as np\n"
        "from sdanet import networks as nw, autodiff as ad\n"
        "w = nw.init_task('segmentation', 3, seed=1)\n"
        "x = np.random.default_rng(0).uniform(0, 1, (1, 1, 32, 32)).astype(np.float32)\n"
        "import sys; sys.stdout.buffer.write(nw.task_forward(ad.Tensor(x), w).y.data.astype('<f4').tobytes())\n"
    )
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, SDANET_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, check=True)
        outs.append(np.frombuffer(res.stdout, dtype="<f4"))
    assert outs[0].size == 3 * 32 * 32
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-5)
