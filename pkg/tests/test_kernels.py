"""Both kernel backends must agree on every hot loop."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cpalign import backend, kernels


needs_numba = pytest.mark.skipif(kernels.NUMBA_IMPLS is None,
                                 reason="numba not importable")


def _pair(name):
    return kernels.NUMPY_IMPLS[name], kernels.NUMBA_IMPLS[name]


@needs_numba
@pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 4), (2, 2)])
def test_conv2d_parity(stride, groups):
    rng = np.random.default_rng(0)
    cin, cout = 8, 12
    xpad = rng.normal(size=(cin, 11, 13))
    w = rng.normal(size=(cout, cin // groups, 3, 3))
    ref, jit = _pair("conv2d")
    a = ref(xpad, w, stride, groups)
    b = jit(xpad, w, stride, groups)
    assert a.shape == b.shape
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("stride", [1, 2, 4])
def test_tconv2d_parity(stride):
    rng = np.random.default_rng(1)
    t = rng.normal(size=(6, 5, 7))
    w = rng.normal(size=(6, 4, stride + 1, stride + 1))
    hz = (5 - 1) * stride + stride + 1
    wz = (7 - 1) * stride + stride + 1
    ref, jit = _pair("tconv2d")
    np.testing.assert_allclose(ref(t, w, stride, 1, hz, wz),
                               jit(t, w, stride, 1, hz, wz),
                               rtol=0, atol=1e-12)


@needs_numba
def test_bilinear_parity():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(5, 9, 9))
    sx = rng.uniform(-1.5, 9.5, size=(9, 9))
    sy = rng.uniform(-1.5, 9.5, size=(9, 9))
    ref, jit = _pair("bilinear")
    np.testing.assert_allclose(ref(f, sx, sy), jit(f, sx, sy),
                               rtol=0, atol=1e-12)


@needs_numba
def test_fps_parity():
    ref, jit = _pair("fps")
    for trial in range(25):
        rng = np.random.default_rng(100 + trial)
        xyz = rng.normal(size=(int(rng.integers(5, 50)), 3))
        k = int(rng.integers(1, xyz.shape[0] + 1))
        assert np.array_equal(ref(xyz, k), jit(xyz, k))


@needs_numba
def test_pillar_parity():
    rng = np.random.default_rng(3)
    n, h, w = 200, 6, 7
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)
    z = rng.normal(size=n)
    inten = rng.uniform(size=n)
    off = rng.uniform(size=n)
    ref, jit = _pair("pillar")
    a = ref(rows, cols, z, inten, off, h, w)
    b = jit(rows, cols, z, inten, off, h, w)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_active_matches_backend():
    if backend.ACTIVE == "numba":
        assert kernels._active is kernels.NUMBA_IMPLS
    else:
        assert kernels._active is kernels.NUMPY_IMPLS


def _run_with_env(value):
    env = dict(os.environ, CPALIGN_BACKEND=value)
    return subprocess.run(
        [sys.executable, "-c",
         "import cpalign.backend as b; print(b.ACTIVE)"],
        capture_output=True, text=True, env=env)


def test_numpy_backend_forced_in_subprocess():
    proc = _run_with_env("numpy")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "numpy"


def test_invalid_backend_rejected():
    proc = _run_with_env("sparkle")
    assert proc.returncode != 0
    assert "CPALIGN_BACKEND" in proc.stderr


def test_forced_numpy_pipeline_matches_active_backend():
    """A tiny end-to-end slice must not depend on the backend choice."""
    code = (
        "import numpy as np\n"
        "from cpalign.numerics import ConvSpec, conv2d\n"
        "rng = np.random.default_rng(7)\n"
        "x = rng.normal(size=(3, 8, 8))\n"
        "w = rng.normal(size=(4, 3, 3, 3))\n"
        "out = conv2d(x, ConvSpec(4, 3, 3, 3, w, stride=2, padding=1))\n"
        "print(repr(float(out.sum())))\n"
    )
    outs = {}
    for value in ("numpy", "auto"):
        env = dict(os.environ, CPALIGN_BACKEND=value)
        proc = subprocess.run([sys.executable, "-c", code],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        outs[value] = float(proc.stdout.strip())
    assert outs["numpy"] == pytest.approx(outs["auto"], rel=1e-12)
