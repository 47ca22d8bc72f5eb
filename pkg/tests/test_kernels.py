import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semimatch import kernels
from semimatch.kernels import _fallback

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")
ck = kernels._ckernels


@compiled
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(3, 9),
    w=st.integers(3, 9),
    o=st.integers(1, 4),
    k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2),
    extra_pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
    dtype=st.sampled_from([np.float32, np.float64]),
)
def test_conv_parity(n, c, h, w, o, k, stride, extra_pad, seed, dtype):
    rng = np.random.default_rng(seed)
    pad = k // 2 + extra_pad
    x = rng.normal(size=(n, c, h, w)).astype(dtype)
    wt = rng.normal(size=(o, c, k, k)).astype(dtype)
    x.flags.writeable = False  # tensors hand the kernels read-only buffers
    wt.flags.writeable = False
    tol = 1e-4 if dtype == np.float32 else 1e-10
    out_py, cols_py = _fallback.conv2d_forward(x, wt, stride, pad)
    out_c, cols_c = ck.conv2d_forward(x, wt, stride, pad)
    np.testing.assert_allclose(out_c, out_py, rtol=tol, atol=tol)
    g = rng.normal(size=out_py.shape).astype(dtype)
    g.flags.writeable = False
    gx_py, gw_py = _fallback.conv2d_backward(g, cols_py, wt, x.shape, stride, pad)
    gx_c, gw_c = ck.conv2d_backward(g, cols_c, wt, x.shape, stride, pad)
    np.testing.assert_allclose(gx_c, gx_py, rtol=tol, atol=tol)
    np.testing.assert_allclose(gw_c, gw_py, rtol=tol, atol=tol)


@compiled
@given(
    c=st.integers(1, 3),
    h=st.integers(2, 7),
    w=st.integers(2, 7),
    seed=st.integers(0, 2**16),
)
def test_bilinear_parity(c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, h, w))
    coords = rng.uniform(-1.5, max(h, w) + 0.5, size=(2, 4, 5, 2))
    # exact integers and borders are the interesting cases
    coords[0, 0, :2] = [[0.0, 0.0], [w - 1.0, h - 1.0]]
    valid = (rng.random((2, 4, 5)) < 0.85).astype(np.uint8)
    np.testing.assert_allclose(
        ck.bilinear_gather(x, coords, valid), _fallback.bilinear_gather(x, coords, valid), atol=1e-12
    )
    g = rng.normal(size=(2, c, 4, 5))
    np.testing.assert_allclose(
        ck.bilinear_scatter(g, coords, valid, h, w), _fallback.bilinear_scatter(g, coords, valid, h, w), atol=1e-12
    )


@compiled
@given(seed=st.integers(0, 2**16), n=st.integers(1, 40), levels=st.integers(1, 4))
def test_argmax_parity_with_ties(seed, n, levels):
    rng = np.random.default_rng(seed)
    p = rng.integers(0, levels, size=(3, 5, n)).astype(np.float64)
    np.testing.assert_array_equal(ck.hard_argmax(p), _fallback.hard_argmax(p))
    np.testing.assert_array_equal(ck.hard_argmax(p.astype(np.float32)), _fallback.hard_argmax(p))


@compiled
def test_argmax_empty():
    assert ck.hard_argmax(np.zeros((0, 4))).shape == (0,)


def test_argmax_ties_pick_lowest_index():
    p = np.array([[0.2, 0.4, 0.4], [0.5, 0.5, 0.0]])
    np.testing.assert_array_equal(kernels.hard_argmax(p), [1, 0])


def test_backend_switching():
    start = kernels.current_backend()
    try:
        for name in kernels.available_backends():
            kernels.use_backend(name)
            assert kernels.current_backend() == name
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(start)


def test_pure_python_environment_flag():
    env = dict(os.environ, SEMIMATCH_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from semimatch import kernels; print(kernels.current_backend())"],
        capture_output=True,
        text=True,
        env=env,
        check=True,
    )
    assert out.stdout.strip() == "python"


@compiled
def test_model_forward_matches_across_backends(tiny_model, rng):
    src = rng.random((2, 3, 16, 16))
    tgt = rng.random((2, 3, 16, 16))
    start = kernels.current_backend()
    try:
        kernels.use_backend("python")
        ref = tiny_model.predict(src, tgt)
        kernels.use_backend("compiled")
        np.testing.assert_allclose(tiny_model.predict(src, tgt), ref, atol=1e-12)
    finally:
        kernels.use_backend(start)
