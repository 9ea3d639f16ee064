"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba path is used when numba imports cleanly and the environment
variable ``GATGPT_PURE_NUMPY`` is unset (or ``0``).  Both flavours are always
importable as ``<name>_numpy`` / ``<name>_numba`` so tests and the benchmark
can compare them directly; ``<name>_numba`` is ``None`` without numba.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("GATGPT_PURE_NUMPY", "0") in ("", "0")


def as_float(x):
    """float32/float64 arrays pass through; anything else becomes float64."""
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def _njit(fn):
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# graph attention: masked softmax over neighbours and weighted aggregation
# ---------------------------------------------------------------------------

def attend_numpy(H, src, dst, nbr, slope):
    """Masked GAT attention for a stack of M independent graphs.

    H: [M, N, dh] projected features; src, dst: [M, N] halves of the score
    (``a[:dh]·H_i`` and ``a[dh:]·H_j``); nbr: [N, N] bool.
    Returns alpha [M, N, N] and the aggregate alpha @ H, before the ELU.
    """
    pre = src[:, :, None] + dst[:, None, :]
    e = np.where(pre > 0, pre, slope * pre)
    e = np.where(nbr[None], e, -np.inf)
    e = e - e.max(axis=-1, keepdims=True)
    p = np.exp(e)
    alpha = p / p.sum(axis=-1, keepdims=True)
    return alpha, alpha @ H


def attend_backward_numpy(H, src, dst, alpha, dagg, slope):
    """Gradients of attend_numpy w.r.t. H, src and dst given d(aggregate)."""
    dalpha = dagg @ np.swapaxes(H, -1, -2)
    dH = np.swapaxes(alpha, -1, -2) @ dagg
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
    pre = src[:, :, None] + dst[:, None, :]
    dpre = np.where(pre > 0, de, slope * de)
    return dH, dpre.sum(axis=-1), dpre.sum(axis=-2)


def _attend_loops(H, src, dst, nbr, slope):
    M, N, dh = H.shape
    alpha = np.zeros((M, N, N), dtype=H.dtype)
    agg = np.zeros((M, N, dh), dtype=H.dtype)
    for m in range(M):
        for i in range(N):
            emax = -np.inf
            for j in range(N):
                if nbr[i, j]:
                    v = src[m, i] + dst[m, j]
                    if v <= 0:
                        v = slope * v
                    alpha[m, i, j] = v
                    if v > emax:
                        emax = v
            total = 0.0
            for j in range(N):
                if nbr[i, j]:
                    w = np.exp(alpha[m, i, j] - emax)
                    alpha[m, i, j] = w
                    total += w
            for j in range(N):
                if nbr[i, j]:
                    w = alpha[m, i, j] / total
                    alpha[m, i, j] = w
                    for c in range(dh):
                        agg[m, i, c] += w * H[m, j, c]
    return alpha, agg


def _attend_backward_loops(H, src, dst, alpha, dagg, slope):
    M, N, dh = H.shape
    dH = np.zeros((M, N, dh), dtype=H.dtype)
    dsrc = np.zeros((M, N), dtype=H.dtype)
    ddst = np.zeros((M, N), dtype=H.dtype)
    dalpha = np.zeros(N, dtype=H.dtype)
    for m in range(M):
        for i in range(N):
            dot = 0.0
            for j in range(N):
                a = alpha[m, i, j]
                s = 0.0
                if a != 0.0:
                    for c in range(dh):
                        s += dagg[m, i, c] * H[m, j, c]
                        dH[m, j, c] += a * dagg[m, i, c]
                dalpha[j] = s
                dot += a * s
            for j in range(N):
                a = alpha[m, i, j]
                if a != 0.0:
                    g = a * (dalpha[j] - dot)
                    if src[m, i] + dst[m, j] <= 0:
                        g *= slope
                    dsrc[m, i] += g
                    ddst[m, j] += g
    return dH, dsrc, ddst


attend_numba = _njit(_attend_loops)
attend_backward_numba = _njit(_attend_backward_loops)


# ---------------------------------------------------------------------------
# GELU (tanh form) with its derivative.  numpy only: its vectorized tanh
# outruns a scalar numba loop at every size we measured.
# ---------------------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + _GELU_K * u * u * u)))


def gelu_and_grad(u):
    """Value and derivative, sharing one tanh evaluation."""
    u2 = u * u
    th = np.tanh(_GELU_C * u * (1.0 + _GELU_K * u2))
    g = 0.5 * u * (1.0 + th)
    dg = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3 * _GELU_K * u2)
    return g, dg


# ---------------------------------------------------------------------------
# block-missing mask: paint contiguous runs from sampled start points
# ---------------------------------------------------------------------------

def fill_blocks_numpy(starts, lengths):
    N, T = starts.shape
    out = np.zeros((N, T), dtype=np.bool_)
    n_idx, t_idx = np.nonzero(starts)
    if n_idx.size == 0:
        return out
    # difference array: +1 at block start, -1 one past its (clipped) end
    diff = np.zeros((N, T + 1), dtype=np.int64)
    ends = np.minimum(t_idx + lengths[n_idx, t_idx], T)
    np.add.at(diff, (n_idx, t_idx), 1)
    np.add.at(diff, (n_idx, ends), -1)
    return np.cumsum(diff[:, :T], axis=1) > 0


def _fill_blocks_loops(starts, lengths):
    N, T = starts.shape
    out = np.zeros((N, T), dtype=np.bool_)
    for n in range(N):
        until = 0
        for t in range(T):
            if starts[n, t]:
                end = t + lengths[n, t]
                if end > until:
                    until = end
            if t < until:
                out[n, t] = True
    return out


fill_blocks_numba = _njit(_fill_blocks_loops)


# ---------------------------------------------------------------------------
# kNN baseline: average of the visible top-k neighbours per (node, step)
# ---------------------------------------------------------------------------

def knn_fill_numpy(values, visible, neighbours, fallback):
    """values [N, T, C]; visible [N, T]; neighbours [N, k] (-1 padded);
    fallback [N, C].  Returns the neighbour average for every (n, t)."""
    N, T, C = values.shape
    valid = neighbours >= 0
    idx = np.where(valid, neighbours, 0)
    vis = visible[idx] & valid[:, :, None]              # [N, k, T]
    vals = values[idx] * vis[..., None]                 # [N, k, T, C]
    count = vis.sum(axis=1)                             # [N, T]
    total = vals.sum(axis=1)                            # [N, T, C]
    out = np.empty_like(values)
    has = count > 0
    out[has] = total[has] / count[has][:, None]
    fb = np.broadcast_to(fallback[:, None, :], values.shape)
    out[~has] = fb[~has]
    return out


def _knn_fill_loops(values, visible, neighbours, fallback):
    N, T, C = values.shape
    k = neighbours.shape[1]
    out = np.empty_like(values)
    for n in range(N):
        for t in range(T):
            count = 0
            for c in range(C):
                out[n, t, c] = 0.0
            for q in range(k):
                j = neighbours[n, q]
                if j >= 0 and visible[j, t]:
                    count += 1
                    for c in range(C):
                        out[n, t, c] += values[j, t, c]
            for c in range(C):
                if count > 0:
                    out[n, t, c] /= count
                else:
                    out[n, t, c] = fallback[n, c]
    return out


knn_fill_numba = _njit(_knn_fill_loops)


def _pick(name):
    fn = globals()[name + "_numba"] if USE_NUMBA else None
    return fn if fn is not None else globals()[name + "_numpy"]


attend = _pick("attend")
attend_backward = _pick("attend_backward")
fill_blocks = _pick("fill_blocks")
knn_fill = _pick("knn_fill")

BACKEND = "numba" if USE_NUMBA else "numpy"
