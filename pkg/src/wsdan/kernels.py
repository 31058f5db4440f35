"""Hot numeric kernels: masked row softmax and layer normalization.

Every kernel exists twice, as a numba ``@njit`` loop nest and as a pure
numpy expression. The dispatchers at the bottom pick the numba path unless
numba is missing or ``WSDAN_DISABLE_NUMBA`` is set to a truthy value.

All kernels operate on 2-D C-contiguous arrays (rows x width); callers
flatten leading axes before calling in.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_flag("WSDAN_DISABLE_NUMBA")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def softmax_forward_numpy(x, mask, shift):
    z = x + shift[:, None]
    z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_numpy(y, g):
    s = (y * g).sum(axis=1, keepdims=True)
    return y * (g - s)


def layer_norm_forward_numpy(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_backward_numpy(g, xhat, rstd, gain):
    dxhat = g * gain
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / d
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def softmax_forward_numba(x, mask, shift):
        rows, cols = x.shape
        out = np.zeros_like(x)
        for r in range(rows):
            c = shift[r]
            m = -np.inf
            for j in range(cols):
                if mask[r, j]:
                    v = x[r, j] + c
                    if v > m:
                        m = v
            total = 0.0
            for j in range(cols):
                if mask[r, j]:
                    e = np.exp((x[r, j] + c) - m)
                    out[r, j] = e
                    total += e
            for j in range(cols):
                out[r, j] /= total
        return out

    @numba.njit(cache=True)
    def softmax_backward_numba(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for j in range(cols):
                s += y[r, j] * g[r, j]
            for j in range(cols):
                out[r, j] = y[r, j] * (g[r, j] - s)
        return out

    @numba.njit(cache=True)
    def layer_norm_forward_numba(x, gain, bias, eps):
        rows, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mean = 0.0
            for j in range(d):
                mean += x[r, j]
            mean /= d
            var = 0.0
            for j in range(d):
                t = x[r, j] - mean
                var += t * t
            var /= d
            s = 1.0 / np.sqrt(var + eps)
            rstd[r] = s
            for j in range(d):
                h = (x[r, j] - mean) * s
                xhat[r, j] = h
                out[r, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def layer_norm_backward_numba(g, xhat, rstd, gain):
        rows, d = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(d, dtype=g.dtype)
        dbias = np.zeros(d, dtype=g.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                t = g[r, j] * gain[j]
                m1 += t
                m2 += t * xhat[r, j]
                dgain[j] += g[r, j] * xhat[r, j]
                dbias[j] += g[r, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[r, j] = rstd[r] * (g[r, j] * gain[j] - m1 - xhat[r, j] * m2)
        return dx, dgain, dbias

else:  # pragma: no cover
    softmax_forward_numba = softmax_forward_numpy
    softmax_backward_numba = softmax_backward_numpy
    layer_norm_forward_numba = layer_norm_forward_numpy
    layer_norm_backward_numba = layer_norm_backward_numpy


BACKENDS = {
    "numpy": (
        softmax_forward_numpy,
        softmax_backward_numpy,
        layer_norm_forward_numpy,
        layer_norm_backward_numpy,
    ),
    "numba": (
        softmax_forward_numba,
        softmax_backward_numba,
        layer_norm_forward_numba,
        layer_norm_backward_numba,
    ),
}

_active = "numba" if USE_NUMBA else "numpy"


def backend():
    """Name of the kernel set currently used by the dispatchers."""
    return _active


def set_backend(name):
    """Switch kernels at runtime ("numpy" or "numba"); returns the previous name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous, _active = _active, name
    return previous


def _kernels(x):
    # numba has no extended-precision type; long double always runs on numpy
    if x.dtype.itemsize > 8:
        return BACKENDS["numpy"]
    return BACKENDS[_active]


def softmax_forward(x, mask, shift):
    return _kernels(x)[0](x, mask, shift)


def softmax_backward(y, g):
    return _kernels(y)[1](y, g)


def layer_norm_forward(x, gain, bias, eps):
    return _kernels(x)[2](x, gain, bias, eps)


def layer_norm_backward(g, xhat, rstd, gain):
    return _kernels(g)[3](g, xhat, rstd, gain)
