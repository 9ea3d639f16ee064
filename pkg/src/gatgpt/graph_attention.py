"""Multi-head graph attention over the node axis, one graph per time step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dataset import AdjacencyMatrix


@dataclass
class GatHead:
    W: np.ndarray  # [d_in, d_head]
    a: np.ndarray  # [2 * d_head]; first half scores the receiving node, second the sender

    @property
    def d_head(self):
        return self.W.shape[1]


@dataclass
class GatParams:
    heads: list = field(default_factory=list)
    leaky_slope: float = 0.2

    @property
    def K(self):
        return len(self.heads)

    @property
    def d_out(self):
        return sum(h.d_head for h in self.heads)

    @classmethod
    def init(cls, d_in: int, d_head: int, K: int, leaky_slope: float = 0.2, rng=None):
        rng = np.random.default_rng(rng)
        heads = []
        for _ in range(K):
            # Glorot-uniform, as in the original GAT
            bw = np.sqrt(6.0 / (d_in + d_head))
            ba = np.sqrt(6.0 / (2 * d_head + 1))
            heads.append(GatHead(rng.uniform(-bw, bw, (d_in, d_head)),
                                 rng.uniform(-ba, ba, 2 * d_head)))
        return cls(heads, leaky_slope)


def drop_edge(A: AdjacencyMatrix, p: float, rng=None) -> AdjacencyMatrix:
    """Zero each nonzero off-diagonal weight independently with probability p.

    Self-loops are never dropped.  ``rng`` is a seed or a Generator.
    """
    if not 0 <= p <= 1:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    if p == 0:
        return A
    rng = np.random.default_rng(rng)
    keep = rng.random(A.weights.shape) >= p
    np.fill_diagonal(keep, True)
    return AdjacencyMatrix(A.weights * keep, self_loops=A.self_loops)


def _neighbours(A) -> np.ndarray:
    nbr = A.neighbours if isinstance(A, AdjacencyMatrix) else np.asarray(A, dtype=bool)
    isolated = np.nonzero(~nbr.any(axis=1))[0]
    if isolated.size:
        raise ValueError(
            f"node(s) {isolated.tolist()} have no neighbours; enable self-loops "
            "or supply an adjacency where every node has an edge")
    return np.ascontiguousarray(nbr)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def _head_forward(Z, head: GatHead, nbr, slope):
    """Z: [M, N, d_in] stack of graphs sharing topology."""
    W, a = head.W, head.a
    dh = W.shape[1]
    H = np.ascontiguousarray(Z @ W)
    src = np.ascontiguousarray(H @ a[:dh])
    dst = np.ascontiguousarray(H @ a[dh:])
    alpha, agg = _kernels.attend(H, src, dst, nbr, slope)
    return _elu(agg), (H, src, dst, alpha, agg)


def gat_head(H_in, A, head: GatHead, slope: float = 0.2, return_attention: bool = False):
    """One attention head on a single graph: [N, d_in] -> [N, d_head]."""
    nbr = _neighbours(A)
    out, (_, _, _, alpha, _) = _head_forward(_kernels.as_float(H_in)[None], head, nbr, slope)
    if return_attention:
        return out[0], alpha[0]
    return out[0]


def gat_multi_head(H_in, A, p: GatParams):
    """Concatenation of every head's output, in head order: [N, K * d_head]."""
    nbr = _neighbours(A)
    Z = _kernels.as_float(H_in)[None]
    return np.concatenate([_head_forward(Z, h, nbr, p.leaky_slope)[0][0] for h in p.heads], axis=-1)


def gat_forward(X, A, p: GatParams):
    """X: [..., N, T, d_in] -> ([..., N, T, d_out], cache).

    The same parameters and topology apply at every time step (and every
    leading batch entry); each step is an independent graph.
    """
    nbr = _neighbours(A)
    X = _kernels.as_float(X)
    *lead, N, T, d_in = X.shape
    Z = np.ascontiguousarray(np.swapaxes(X.reshape(-1, N, T, d_in), 1, 2).reshape(-1, N, d_in))
    outs, caches = [], []
    for h in p.heads:
        o, c = _head_forward(Z, h, nbr, p.leaky_slope)
        outs.append(o)
        caches.append(c)
    out = np.concatenate(outs, axis=-1)                            # [B*T, N, d_out]
    out = np.swapaxes(out.reshape(-1, T, N, out.shape[-1]), 1, 2).reshape(*lead, N, T, -1)
    return out, (Z, X.shape, caches)


def gat_backward(dout, cache, p: GatParams):
    """Returns (dX, [(dW, da) per head])."""
    Z, xshape, caches = cache
    *lead, N, T, d_in = xshape
    d = np.swapaxes(dout.reshape(-1, N, T, dout.shape[-1]), 1, 2).reshape(-1, N, dout.shape[-1])
    dZ = np.zeros_like(Z)
    grads = []
    col = 0
    for h, (H, src, dst, alpha, agg) in zip(p.heads, caches):
        dh = h.d_head
        W, a = h.W, h.a
        dagg = d[..., col:col + dh] * np.where(agg > 0, 1, np.exp(np.minimum(agg, 0)))
        col += dh
        dH, dsrc, ddst = _kernels.attend_backward(H, src, dst, alpha, np.ascontiguousarray(dagg),
                                                  p.leaky_slope)
        dH = dH + dsrc[..., None] * a[:dh] + ddst[..., None] * a[dh:]
        da = np.concatenate([np.einsum("mn,mnc->c", dsrc, H), np.einsum("mn,mnc->c", ddst, H)])
        dW = Z.reshape(-1, d_in).T @ dH.reshape(-1, dh)
        dZ += dH @ W.T
        grads.append((dW, da))
    dX = np.swapaxes(dZ.reshape(-1, T, N, d_in), 1, 2).reshape(xshape)
    return dX, grads


def gat_over_time(X, A, p: GatParams):
    """[N, T, d_in] -> [N, T, d_out]; gat_multi_head at each step."""
    return gat_forward(X, A, p)[0]
