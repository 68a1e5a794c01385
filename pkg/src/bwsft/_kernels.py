"""Hot inner loops with a numba path and a pure-numpy path.

Set ``BWSFT_NUMBA=0`` in the environment to force the numpy implementations
(checked once at import).  Both paths compute the same quantities; mask
thresholding is bit-identical, float kernels agree to rounding.
"""
from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("BWSFT_NUMBA", "1").lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715
# fastmath without nnan/ninf, so non-finite activations still surface
_FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


# ---------------------------------------------------------------- numpy path

def threshold_regions_np(u, prompt_len, starts, stops, rate_pre, rate_act, rate_suf):
    """Turn response-position uniforms into full-length masks.

    ``u`` is (N, L_r); row ``n`` has its supervised region at full-sequence
    positions ``[starts[n], stops[n])``.  Positions before it in the response
    use ``rate_pre``, after it ``rate_suf``.  The min-one rule is applied to the
    supervised region only.
    """
    n, lr = u.shape
    pos = np.arange(prompt_len, prompt_len + lr)[None, :]
    starts = np.asarray(starts)[:, None]
    stops = np.asarray(stops)[:, None]
    pre = pos < starts
    act = (pos >= starts) & (pos < stops)
    rate = np.where(pre, np.asarray(rate_pre)[:, None],
                    np.where(act, np.asarray(rate_act)[:, None], np.asarray(rate_suf)[:, None]))
    resp = (u < rate).astype(np.int8)
    empty = ~(resp.astype(bool) & act).any(axis=1)
    rows = np.nonzero(empty)[0]
    resp[rows, stops[rows, 0] - 1 - prompt_len] = 1
    out = np.zeros((n, prompt_len + lr), dtype=np.int8)
    out[:, prompt_len:] = resp
    return out


def gelu_forward_np(x):
    """tanh-approximate GELU; also returns the tanh term for the backward pass."""
    th = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_C * x ** 3))
    return 0.5 * x * (1.0 + th), th


def gelu_backward_np(x, th, dy):
    dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def log_softmax_np(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, error_model="numpy")
    def _threshold_regions_nb(u, prompt_len, starts, stops, rate_pre, rate_act, rate_suf):
        n, lr = u.shape
        out = np.zeros((n, prompt_len + lr), dtype=np.int8)
        for r in range(n):
            lo = starts[r]
            hi = stops[r]
            hit = False
            for j in range(lr):
                p = prompt_len + j
                if p < lo:
                    rate = rate_pre[r]
                elif p < hi:
                    rate = rate_act[r]
                else:
                    rate = rate_suf[r]
                if u[r, j] < rate:
                    out[r, p] = 1
                    if lo <= p < hi:
                        hit = True
            if not hit:
                out[r, hi - 1] = 1
        return out

    @njit(cache=True, fastmath=_FAST, error_model="numpy")
    def _gelu_forward_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        th = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            a = 2.0 * _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
            # tanh(a / 2) through one exp; stable for either sign
            e = np.exp(-abs(a))
            t = (1.0 - e) / (1.0 + e)
            if a < 0:
                t = -t
            th[i] = t
            out[i] = 0.5 * v * (1.0 + t)
        return out.reshape(x.shape), th.reshape(x.shape)

    @njit(cache=True, fastmath=_FAST, error_model="numpy")
    def _gelu_backward_nb(x, th, dy):
        fx = x.ravel()
        ft = th.ravel()
        fd = dy.ravel()
        out = np.empty_like(fd)
        for i in range(fx.size):
            v = fx[i]
            t = ft[i]
            d = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
            out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d)
        return out.reshape(x.shape)

    @njit(cache=True, error_model="numpy")
    def _log_softmax_nb(z2):
        rows, cols = z2.shape
        out = np.empty_like(z2)
        for r in range(rows):
            m = z2[r, 0]
            for c in range(1, cols):
                if z2[r, c] > m:
                    m = z2[r, c]
            s = 0.0
            for c in range(cols):
                s += np.exp(z2[r, c] - m)
            ls = np.log(s)
            for c in range(cols):
                out[r, c] = z2[r, c] - m - ls
        return out


def _as_rows(x, n):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=np.float64), (n,)))


def threshold_regions(u, prompt_len, starts, stops, rate_pre, rate_act, rate_suf):
    u = np.ascontiguousarray(u, dtype=np.float64)
    n = u.shape[0]
    starts = np.ascontiguousarray(np.broadcast_to(np.asarray(starts, dtype=np.int64), (n,)))
    stops = np.ascontiguousarray(np.broadcast_to(np.asarray(stops, dtype=np.int64), (n,)))
    args = (_as_rows(rate_pre, n), _as_rows(rate_act, n), _as_rows(rate_suf, n))
    if USE_NUMBA:
        return _threshold_regions_nb(u, int(prompt_len), starts, stops, *args)
    return threshold_regions_np(u, int(prompt_len), starts, stops, *args)


def gelu_forward(x):
    if USE_NUMBA:
        return _gelu_forward_nb(np.ascontiguousarray(x))
    return gelu_forward_np(x)


def gelu_backward(x, th, dy):
    if USE_NUMBA:
        return _gelu_backward_nb(np.ascontiguousarray(x), np.ascontiguousarray(th), np.ascontiguousarray(dy))
    return gelu_backward_np(x, th, dy)


def log_softmax(z):
    if USE_NUMBA:
        z2 = np.ascontiguousarray(z).reshape(-1, z.shape[-1])
        return _log_softmax_nb(z2).reshape(z.shape)
    return log_softmax_np(z)
