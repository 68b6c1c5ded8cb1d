"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``BGNN_KERNELS``:

    BGNN_KERNELS=numba   compiled kernels (default when numba imports)
    BGNN_KERNELS=numpy   vectorised numpy only

Both paths compute the same quantities; they may differ in the last ulp
because summation order differs, so never mix them inside one run.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _absdiff_fwd_np(h):
    diff = h[:, :, None, :] - h[:, None, :, :]
    return np.abs(diff)


def _absdiff_bwd_np(h, g):
    s = np.sign(h[:, :, None, :] - h[:, None, :, :]) * g
    return s.sum(axis=2) - s.sum(axis=1)


def _layernorm_fwd_np(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _layernorm_bwd_np(xhat, rstd, g):
    # g is the gradient w.r.t. xhat (gain already applied by caller)
    d = xhat.shape[1]
    gm = g.mean(axis=1, keepdims=True)
    gx = (g * xhat).sum(axis=1, keepdims=True) / d
    return rstd[:, None] * (g - gm - xhat * gx)


NUMPY_KERNELS = {
    "absdiff_fwd": _absdiff_fwd_np,
    "absdiff_bwd": _absdiff_bwd_np,
    "layernorm_fwd": _layernorm_fwd_np,
    "layernorm_bwd": _layernorm_bwd_np,
}


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _absdiff_fwd_nb(h):
        B, V, D = h.shape
        out = np.empty((B, V, V, D))
        for b in range(B):
            for i in range(V):
                for j in range(V):
                    for k in range(D):
                        out[b, i, j, k] = abs(h[b, i, k] - h[b, j, k])
        return out

    @njit(cache=True)
    def _absdiff_bwd_nb(h, g):
        B, V, D = h.shape
        gh = np.zeros((B, V, D))
        for b in range(B):
            for i in range(V):
                for j in range(V):
                    for k in range(D):
                        d = h[b, i, k] - h[b, j, k]
                        if d > 0.0:
                            s = g[b, i, j, k]
                        elif d < 0.0:
                            s = -g[b, i, j, k]
                        else:
                            s = 0.0
                        gh[b, i, k] += s
                        gh[b, j, k] -= s
        return gh

    @njit(cache=True)
    def _layernorm_fwd_nb(x, eps):
        R, D = x.shape
        xhat = np.empty((R, D))
        rstd = np.empty(R)
        for r in range(R):
            m = 0.0
            for k in range(D):
                m += x[r, k]
            m /= D
            v = 0.0
            for k in range(D):
                c = x[r, k] - m
                v += c * c
            v /= D
            s = 1.0 / np.sqrt(v + eps)
            rstd[r] = s
            for k in range(D):
                xhat[r, k] = (x[r, k] - m) * s
        return xhat, rstd

    @njit(cache=True)
    def _layernorm_bwd_nb(xhat, rstd, g):
        R, D = xhat.shape
        gx = np.empty((R, D))
        for r in range(R):
            gm = 0.0
            gxh = 0.0
            for k in range(D):
                gm += g[r, k]
                gxh += g[r, k] * xhat[r, k]
            gm /= D
            gxh /= D
            for k in range(D):
                gx[r, k] = rstd[r] * (g[r, k] - gm - xhat[r, k] * gxh)
        return gx

    NUMBA_KERNELS = {
        "absdiff_fwd": _absdiff_fwd_nb,
        "absdiff_bwd": _absdiff_bwd_nb,
        "layernorm_fwd": _layernorm_fwd_nb,
        "layernorm_bwd": _layernorm_bwd_nb,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = None


def _select_backend():
    want = os.environ.get("BGNN_KERNELS", "numba" if HAS_NUMBA else "numpy").lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"BGNN_KERNELS must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAS_NUMBA:
        want = "numpy"
    return want


BACKEND = _select_backend()
_K = NUMBA_KERNELS if BACKEND == "numba" else NUMPY_KERNELS


def absdiff_fwd(h):
    """|h_i - h_j| for every node pair: [B, V, D] -> [B, V, V, D]."""
    return _K["absdiff_fwd"](np.ascontiguousarray(h))


def absdiff_bwd(h, g):
    return _K["absdiff_bwd"](np.ascontiguousarray(h), np.ascontiguousarray(g))


def layernorm_fwd(x, eps):
    """Row-wise standardisation of a 2-D array; returns (xhat, 1/std)."""
    return _K["layernorm_fwd"](np.ascontiguousarray(x), eps)


def layernorm_bwd(xhat, rstd, g):
    return _K["layernorm_bwd"](xhat, rstd, np.ascontiguousarray(g))
