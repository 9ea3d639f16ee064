"""Frozen transformer backbone, output head, and the assembled imputation model.

Parameters live in one flat ``name -> array`` mapping (the checkpoint
schema); the typed views (``ModelParams.embedding``, ``.gat``, ``.blocks``,
``.head``) wrap the same arrays without copying.  Storage is float32 by
default; arithmetic runs in the promoted dtype of inputs and parameters, so
float32 parameters train in float32 and ``params.astype(np.float64)`` gives a
float64 model for gradient checks.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dataset import AdjacencyMatrix, NormStats, TimeSeriesTensor
from .embedding import EmbeddingParams, positional_encoding, token_embed, token_embed_backward
from .graph_attention import GatHead, GatParams, drop_edge, gat_backward, gat_forward

LN_EPS = 1e-5

BLOCK_TENSORS = (
    "ln1.scale", "ln1.shift",
    "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias",
    "ln2.scale", "ln2.shift",
    "ff.1.weight", "ff.1.bias", "ff.2.weight", "ff.2.bias",
)


@dataclass
class ModelConfig:
    c_in: int = 1            # data channels; the model input adds one mask channel
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4         # backbone self-attention heads
    gat_heads: int = 2       # K
    d_head: int = 0          # GAT head width; 0 means d_model // gat_heads
    c_out: int = 0           # 0 means c_in
    kernel_size: int = 3
    leaky_slope: float = 0.2
    gat_residual: bool = True  # add the attention output to its input embedding

    def __post_init__(self):
        if self.d_head == 0 and self.gat_heads > 0:
            self.d_head = self.d_model // self.gat_heads
        if self.c_out == 0:
            self.c_out = self.c_in
        self.validate()

    def validate(self):
        for name in ("c_in", "d_model", "n_layers", "n_heads", "gat_heads", "d_head", "c_out",
                     "kernel_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"model config: {name} must be positive, got {getattr(self, name)}")
        if self.d_model % 2:
            raise ValueError(f"model config: d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ValueError(f"model config: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.gat_heads * self.d_head != self.d_model:
            raise ValueError(
                f"model config: gat_heads*d_head = {self.gat_heads * self.d_head} must equal d_model={self.d_model}")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"model config: kernel_size must be odd, got {self.kernel_size}")
        if not 0 < self.leaky_slope < 1:
            raise ValueError(f"model config: leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    @property
    def c_model_in(self):
        return self.c_in + 1

    def schema(self) -> dict:
        """Ordered ``name -> (shape, frozen)`` for every tensor of the model."""
        d, c = self.d_model, self.c_model_in
        out = {
            "embed.conv.weight": ((d, c, self.kernel_size), False),
            "embed.conv.bias": ((d,), False),
        }
        for k in range(self.gat_heads):
            out[f"gat.h{k}.W"] = ((d, self.d_head), False)
            out[f"gat.h{k}.a"] = ((2 * self.d_head,), False)
        shapes = {
            "ln1.scale": (d,), "ln1.shift": (d,), "ln2.scale": (d,), "ln2.shift": (d,),
            "ff.1.weight": (d, 4 * d), "ff.1.bias": (4 * d,),
            "ff.2.weight": (4 * d, d), "ff.2.bias": (d,),
        }
        for p in "qkvo":
            shapes[f"attn.{p}.weight"] = (d, d)
            shapes[f"attn.{p}.bias"] = (d,)
        for l in range(self.n_layers):
            for name in BLOCK_TENSORS:
                out[f"block{l}.{name}"] = (shapes[name], not name.startswith("ln"))
        out["head.weight"] = ((d, self.c_out), False)
        out["head.bias"] = ((self.c_out,), False)
        return out


@dataclass
class BlockParams:
    """One pre-norm transformer block; weights are [d_in, d_out] (x @ W)."""

    t: dict
    n_heads: int

    def __getitem__(self, name):
        return self.t[name]


@dataclass
class HeadParams:
    weight: np.ndarray  # [d_model, C_out]
    bias: np.ndarray


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    frozen: dict
    norm_stats: NormStats | None = None

    @property
    def embedding(self) -> EmbeddingParams:
        return EmbeddingParams(self.tensors["embed.conv.weight"], self.tensors["embed.conv.bias"])

    @property
    def gat(self) -> GatParams:
        heads = [GatHead(self.tensors[f"gat.h{k}.W"], self.tensors[f"gat.h{k}.a"])
                 for k in range(self.config.gat_heads)]
        return GatParams(heads, self.config.leaky_slope)

    @property
    def blocks(self) -> list:
        out = []
        for l in range(self.config.n_layers):
            pre = f"block{l}."
            out.append(BlockParams({n: self.tensors[pre + n] for n in BLOCK_TENSORS}, self.config.n_heads))
        return out

    @property
    def head(self) -> HeadParams:
        return HeadParams(self.tensors["head.weight"], self.tensors["head.bias"])

    @property
    def dtype(self):
        return self.tensors["head.weight"].dtype

    def trainable(self) -> list:
        return [n for n in self.tensors if not self.frozen[n]]

    def copy(self) -> "ModelParams":
        return ModelParams(copy.deepcopy(self.config), {k: v.copy() for k, v in self.tensors.items()},
                           dict(self.frozen), copy.deepcopy(self.norm_stats))

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out

    def n_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable())


def count_trainable(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count (embedding, GAT, layer norms, head)."""
    d = cfg.d_model
    return (d * cfg.c_model_in * cfg.kernel_size + d
            + cfg.gat_heads * (d * cfg.d_head + 2 * cfg.d_head)
            + cfg.n_layers * 4 * d
            + d * cfg.c_out + cfg.c_out)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Random desk-scale initialization; frozen flags follow the freeze policy.

    Attention and feed-forward weights are N(0, 1/fan_in) so the frozen
    blocks act as a well-conditioned random feature map; the residual
    projections (attn.o, ff.2) are further scaled by 1/sqrt(2L).  Biases
    start at zero, layer norms at scale 1, shift 0.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    emb = EmbeddingParams.init(config.c_model_in, config.d_model, config.kernel_size, rng)
    gat = GatParams.init(config.d_model, config.d_head, config.gat_heads, config.leaky_slope, rng)
    t = {"embed.conv.weight": emb.weight, "embed.conv.bias": emb.bias}
    for k, h in enumerate(gat.heads):
        t[f"gat.h{k}.W"] = h.W
        t[f"gat.h{k}.a"] = h.a
    d = config.d_model
    depth = np.sqrt(2 * config.n_layers)
    for l in range(config.n_layers):
        pre = f"block{l}."
        t[pre + "ln1.scale"] = np.ones(d)
        t[pre + "ln1.shift"] = np.zeros(d)
        for p in "qkv":
            t[pre + f"attn.{p}.weight"] = rng.normal(0, 1 / np.sqrt(d), (d, d))
            t[pre + f"attn.{p}.bias"] = np.zeros(d)
        t[pre + "attn.o.weight"] = rng.normal(0, 1 / (np.sqrt(d) * depth), (d, d))
        t[pre + "attn.o.bias"] = np.zeros(d)
        t[pre + "ln2.scale"] = np.ones(d)
        t[pre + "ln2.shift"] = np.zeros(d)
        t[pre + "ff.1.weight"] = rng.normal(0, 1 / np.sqrt(d), (d, 4 * d))
        t[pre + "ff.1.bias"] = np.zeros(4 * d)
        t[pre + "ff.2.weight"] = rng.normal(0, 1 / (np.sqrt(4 * d) * depth), (4 * d, d))
        t[pre + "ff.2.bias"] = np.zeros(d)
    bound = 1.0 / np.sqrt(d)
    t["head.weight"] = rng.uniform(-bound, bound, (d, config.c_out))
    t["head.bias"] = rng.uniform(-bound, bound, config.c_out)
    schema = config.schema()
    tensors = {n: np.ascontiguousarray(t[n], dtype=dtype) for n in schema}
    frozen = {n: fz for n, (_, fz) in schema.items()}
    return ModelParams(config, tensors, frozen)


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _causal_mask(T):
    return np.tril(np.ones((T, T), dtype=bool))


def block_forward(x, bp: BlockParams, need_grad: bool = True):
    """x: [S, T, d] -> ([S, T, d], cache).  Causal multi-head self-attention + MLP."""
    S, T, d = x.shape
    nh = bp.n_heads
    hd = d // nh
    h1, ln1 = _layer_norm(x, bp["ln1.scale"], bp["ln1.shift"])

    def proj(p):
        y = h1 @ bp[f"attn.{p}.weight"] + bp[f"attn.{p}.bias"]
        return y.reshape(S, T, nh, hd).transpose(0, 2, 1, 3)      # [S, nh, T, hd]

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(hd)
    scores = np.where(_causal_mask(T), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    ctx = (P @ v).transpose(0, 2, 1, 3).reshape(S, T, d)
    x2 = x + ctx @ bp["attn.o.weight"] + bp["attn.o.bias"]
    h2, ln2 = _layer_norm(x2, bp["ln2.scale"], bp["ln2.shift"])
    u = h2 @ bp["ff.1.weight"] + bp["ff.1.bias"]
    if need_grad:
        g, dgelu = _kernels.gelu_and_grad(u)
    else:
        g, dgelu = _kernels.gelu(u), None
    y = x2 + g @ bp["ff.2.weight"] + bp["ff.2.bias"]
    return y, (h1, ln1, q, k, v, P, ctx, h2, ln2, dgelu, g)


def block_backward(dy, cache, bp: BlockParams, frozen_grads: bool = False):
    """Returns (dx, grads) with grads keyed by block-local tensor names.

    Frozen attention/feed-forward weight gradients are only formed when
    ``frozen_grads`` is true; the input gradient always flows through them.
    """
    h1, ln1, q, k, v, P, ctx, h2, ln2, dgelu, g = cache
    S, T, d = dy.shape
    nh = bp.n_heads
    hd = d // nh
    grads = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])

    # feed-forward branch
    if frozen_grads:
        grads["ff.2.weight"] = flat(g).T @ flat(dy)
        grads["ff.2.bias"] = flat(dy).sum(axis=0)
    du = (dy @ bp["ff.2.weight"].T) * dgelu
    if frozen_grads:
        grads["ff.1.weight"] = flat(h2).T @ flat(du)
        grads["ff.1.bias"] = flat(du).sum(axis=0)
    dh2 = du @ bp["ff.1.weight"].T
    dln, grads["ln2.scale"], grads["ln2.shift"] = _layer_norm_backward(dh2, ln2)
    dx2 = dy + dln

    # attention branch
    if frozen_grads:
        grads["attn.o.weight"] = flat(ctx).T @ flat(dx2)
        grads["attn.o.bias"] = flat(dx2).sum(axis=0)
    dctx = (dx2 @ bp["attn.o.weight"].T).reshape(S, T, nh, hd).transpose(0, 2, 1, 3)
    dP = dctx @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dctx
    ds = P * (dP - (P * dP).sum(axis=-1, keepdims=True)) / math.sqrt(hd)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dh1 = np.zeros_like(h1)
    for name, dz in (("q", dq), ("k", dk), ("v", dv)):
        dz = dz.transpose(0, 2, 1, 3).reshape(S, T, d)
        if frozen_grads:
            grads[f"attn.{name}.weight"] = flat(h1).T @ flat(dz)
            grads[f"attn.{name}.bias"] = flat(dz).sum(axis=0)
        dh1 += dz @ bp[f"attn.{name}.weight"].T
    dln, grads["ln1.scale"], grads["ln1.shift"] = _layer_norm_backward(dh1, ln1)
    return dx2 + dln, grads


def backbone_forward(X, blocks, return_attention: bool = False):
    """Per-node causal transformer over time: [..., T, d] -> [..., T, d].

    With ``return_attention`` also returns each block's attention
    probabilities, [S, n_heads, T, T] with S the flattened leading dims.
    """
    X = _kernels.as_float(X)
    h = X.reshape(-1, *X.shape[-2:])
    probs = []
    for bp in blocks:
        h, c = block_forward(h, bp, need_grad=False)
        probs.append(c[5])
    h = h.reshape(X.shape)
    return (h, probs) if return_attention else h


def output_head(H, head: HeadParams):
    """Affine map of the last axis: [..., d_model] -> [..., C_out]."""
    W = head.weight
    if H.shape[-1] != W.shape[0]:
        raise ValueError(f"output head expects {W.shape[0]} features, got {H.shape[-1]}")
    return H @ W + head.bias


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def model_inputs(values, visible):
    """Stack normalized values (0 where not visible) with the visibility channel."""
    vis = np.asarray(visible, dtype=bool)
    x = np.where(vis[..., None], values, 0.0)
    return np.concatenate([x, vis[..., None].astype(np.float64)], axis=-1)


def forward_train(params: ModelParams, x_in, nbr):
    """x_in: [B, N, T, C_in + 1] -> (pred [B, N, T, C_out], cache)."""
    emb = params.embedding
    x_in = np.asarray(x_in, dtype=params.dtype)
    B, N, T, _ = x_in.shape
    pe = positional_encoding(T, params.config.d_model).astype(params.dtype)
    e = token_embed(x_in, emb) + pe
    z, gat_cache = gat_forward(e, nbr, params.gat)
    if params.config.gat_residual:
        z = z + e
    h = z.reshape(-1, T, z.shape[-1])
    block_caches = []
    for bp in params.blocks:
        h, c = block_forward(h, bp)
        block_caches.append(c)
    h = h.reshape(B, N, T, -1)
    pred = output_head(h, params.head)
    return pred, (x_in, gat_cache, block_caches, h)


def backward_train(dpred, cache, params: ModelParams, frozen_grads: bool = False) -> dict:
    """Gradients keyed by tensor name for every trainable tensor
    (and every frozen one too when ``frozen_grads``)."""
    x_in, gat_cache, block_caches, h = cache
    W = params.tensors["head.weight"]
    grads = {
        "head.weight": h.reshape(-1, h.shape[-1]).T @ dpred.reshape(-1, dpred.shape[-1]),
        "head.bias": dpred.reshape(-1, dpred.shape[-1]).sum(axis=0),
    }
    dh = (dpred @ W.T)
    B, N, T, d = dh.shape
    dh = dh.reshape(-1, T, d)
    blocks = params.blocks
    for l in reversed(range(len(blocks))):
        dh, g = block_backward(dh, block_caches[l], blocks[l], frozen_grads)
        grads.update({f"block{l}.{n}": v for n, v in g.items()})
    dz = dh.reshape(B, N, T, d)
    de, gat_grads = gat_backward(dz, gat_cache, params.gat)
    if params.config.gat_residual:
        de = de + dz
    for k, (dW, da) in enumerate(gat_grads):
        grads[f"gat.h{k}.W"] = dW
        grads[f"gat.h{k}.a"] = da
    grads["embed.conv.weight"], grads["embed.conv.bias"] = token_embed_backward(de, x_in, params.embedding)
    return grads


def masked_loss_grad(pred, target, mask, kind: str = "mae"):
    """Masked mean error and its gradient w.r.t. pred; mask is [..., N, T]."""
    m = np.broadcast_to(np.asarray(mask, bool)[..., None], pred.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("loss mask selects no entries")
    diff = np.where(m, pred - target, 0.0)
    kind = kind.lower()
    if kind == "mae":
        return np.abs(diff).sum() / n, np.sign(diff) / n
    if kind == "mse":
        return (diff * diff).sum() / n, 2.0 * diff / n
    raise ValueError(f"unknown loss {kind!r}; expected 'mae' or 'mse'")


def loss_and_grads(params: ModelParams, x_in, target, mask, nbr, kind: str = "mae",
                   frozen_grads: bool = False):
    pred, cache = forward_train(params, x_in, nbr)
    loss, dpred = masked_loss_grad(pred, np.asarray(target, dtype=pred.dtype), mask, kind)
    return loss, backward_train(dpred, cache, params, frozen_grads)


def model_forward(t: TimeSeriesTensor, A: AdjacencyMatrix, params: ModelParams, mode: str = "eval",
                  seed: int = 0, dropedge_p: float = 0.0):
    """embed -> graph attention -> frozen blocks -> head, in normalized units.

    ``t`` holds normalized values; entries with ``observed`` false are fed as
    0 with a 0 in the mask channel.  In ``"train"`` mode the adjacency goes
    through DropEdge (probability ``dropedge_p``, seeded by ``seed``).
    """
    mode = mode.lower()
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if t.n_channels != params.config.c_in:
        raise ValueError(f"model expects {params.config.c_in} data channels, tensor has {t.n_channels}")
    if mode == "train":
        A = drop_edge(A, dropedge_p, seed)
    x_in = model_inputs(t.values, t.observed)[None]
    return forward_train(params, x_in, A.neighbours)[0][0]


__all__ = [
    "ModelConfig", "ModelParams", "BlockParams", "HeadParams", "init_model", "count_trainable",
    "block_forward", "block_backward", "backbone_forward", "output_head", "model_forward",
    "model_inputs", "forward_train", "backward_train", "loss_and_grads", "masked_loss_grad",
]
