import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsdan import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def _outputs(name, rows, width, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, width)) * 3
    mask = rng.random((rows, width)) > 0.3
    mask[np.arange(rows), rng.integers(width, size=rows)] = True
    shift = rng.standard_normal(rows)
    g = rng.standard_normal((rows, width))
    gain, bias = rng.standard_normal(width), rng.standard_normal(width)
    k = kernels.BACKENDS[name]
    y = k[0](x, mask, shift)
    ln, xhat, rstd = k[2](x, gain, bias, 1e-6)
    return (y, k[1](y, g), ln, xhat, rstd, *k[3](g, xhat, rstd, gain))


@needs_numba
@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 40), width=st.integers(1, 33), seed=st.integers(0, 10_000))
def test_backends_agree(rows, width, seed):
    for a, b in zip(_outputs("numpy", rows, width, seed), _outputs("numba", rows, width, seed)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_set_backend_round_trip():
    previous = kernels.set_backend("numpy")
    try:
        assert kernels.backend() == "numpy"
    finally:
        kernels.set_backend(previous)
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_env_flag_forces_numpy():
    env = dict(os.environ, WSDAN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from wsdan import kernels; print(kernels.backend())"],
                         capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_backend_is_numba_when_available():
    env = {k: v for k, v in os.environ.items() if k != "WSDAN_DISABLE_NUMBA"}
    out = subprocess.run([sys.executable, "-c", "from wsdan import kernels; print(kernels.backend())"],
                         capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "numba"


def test_long_double_routes_to_numpy():
    x = np.zeros((2, 3), dtype=np.longdouble)
    assert kernels._kernels(x) is kernels.BACKENDS["numpy"]
    y = kernels.softmax_forward(x, np.ones((2, 3), dtype=bool), np.zeros(2, dtype=np.longdouble))
    assert y.dtype == np.longdouble
