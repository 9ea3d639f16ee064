"""Token embedding (1-D convolution over time) plus sinusoidal positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import as_float


@dataclass
class EmbeddingParams:
    weight: np.ndarray  # [d_model, C_in, k]
    bias: np.ndarray    # [d_model]

    @property
    def d_model(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @classmethod
    def init(cls, c_in: int, d_model: int, kernel_size: int = 3, rng=None):
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel width must be odd, got {kernel_size}")
        if d_model % 2:
            raise ValueError(f"d_model must be even, got {d_model}")
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(c_in * kernel_size)
        return cls(rng.uniform(-bound, bound, (d_model, c_in, kernel_size)),
                   rng.uniform(-bound, bound, d_model))


def _unfold(x, k):
    """[B, T, C] -> [B, T, C*k] sliding windows with zero 'same' padding."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    T = x.shape[1]
    # window layout matches weight.reshape(d, C*k): channel-major, tap-minor
    cols = np.stack([xp[:, j:j + T, :] for j in range(k)], axis=-1)  # [B, T, C, k]
    return cols.reshape(x.shape[0], T, -1)


def token_embed(x, p: EmbeddingParams):
    """Conv1d along time with same padding, applied independently per node.

    x is [..., T, C_in]; the result is [..., T, d_model].
    """
    x = as_float(x)
    d, c_in, k = p.weight.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {c_in}")
    lead = x.shape[:-2]
    cols = _unfold(x.reshape(-1, *x.shape[-2:]), k)
    out = cols @ p.weight.reshape(d, -1).T + p.bias
    return out.reshape(*lead, x.shape[-2], d)


def token_embed_backward(dout, x, p: EmbeddingParams):
    """Gradients (d_weight, d_bias) of token_embed; the input is data, not a parameter."""
    d, c_in, k = p.weight.shape
    cols = _unfold(as_float(x).reshape(-1, *x.shape[-2:]), k).reshape(-1, c_in * k)
    g = dout.reshape(-1, d)
    return (g.T @ cols).reshape(d, c_in, k), g.sum(axis=0)


def positional_encoding(n_steps: int, d_model: int) -> np.ndarray:
    """[T, d_model] table: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(n_steps, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((n_steps, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def embed(x, p: EmbeddingParams):
    """token_embed(x) + positional_encoding, broadcast over nodes."""
    te = token_embed(x, p)
    return te + positional_encoding(te.shape[-2], p.d_model)
