"""Self-supervised masked fine-tuning of the trainable subset, and imputation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .backbone import ModelParams, forward_train, loss_and_grads, model_inputs
from .dataset import AdjacencyMatrix, EvalMask, TimeSeriesTensor, normalize
from .graph_attention import drop_edge

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    max_epochs: int = 300
    window: int = 24              # T_w, steps per training window
    batch_size: int = 2           # windows per optimizer step
    dropedge_p: float = 0.1
    train_mask_ratio: float = 0.25
    patience: int = 50
    seed: int = 0
    loss: str = "mae"
    lr_schedule: str = "cosine"  # or "constant"; cosine decays to 0 over max_epochs

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        for name in ("max_epochs", "window", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.dropedge_p <= 1:
            raise ValueError(f"dropedge_p must lie in [0, 1], got {self.dropedge_p}")
        if not 0 < self.train_mask_ratio < 1:
            raise ValueError(f"train_mask_ratio must lie in (0, 1), got {self.train_mask_ratio}")
        self.loss = self.loss.lower()
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"loss must be 'mae' or 'mse', got {self.loss!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_mse: float


def masked_loss(pred, target, mask, kind: str = "mae") -> float:
    """Mean absolute (or squared) error over entries where ``mask`` [N, T] is set.

    ``pred``/``target`` are [N, T, C]; every channel of a masked entry counts.
    """
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("masked_loss: mask selects no entries")
    diff = (pred - target)[m]
    kind = kind.lower()
    if kind == "mae":
        return float(np.abs(diff).mean())
    if kind == "mse":
        return float((diff * diff).mean())
    raise ValueError(f"unknown loss {kind!r}; expected 'mae' or 'mse'")


def make_training_mask(observed, eval_mask, ratio: float, epoch_seed) -> np.ndarray:
    """Fresh Bernoulli(ratio) selection over observed entries outside the eval mask.

    Selected entries are hidden from the model input and used as loss targets.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"training mask ratio must lie in (0, 1), got {ratio}")
    observed = np.asarray(observed, dtype=bool)
    eligible = observed.copy()
    if eval_mask is not None:
        eligible &= ~(eval_mask.hidden if isinstance(eval_mask, EvalMask) else np.asarray(eval_mask, bool))
    if not eligible.any():
        raise ValueError("no eligible entries for the training mask (everything is missing or held out)")
    rng = np.random.default_rng(epoch_seed)
    return (rng.random(observed.shape) < ratio) & eligible


class Adam:
    """Adam over the trainable tensors of a ModelParams; frozen ones are never touched."""

    def __init__(self, params: ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.names = params.trainable()
        self.m = {n: np.zeros(params.tensors[n].shape) for n in self.names}
        self.v = {n: np.zeros(params.tensors[n].shape) for n in self.names}

    def step(self, params: ModelParams, grads: dict):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            arr = params.tensors[n]
            arr[...] = (arr.astype(np.float64) - upd).astype(arr.dtype)


def _windows(n_steps, window, offset):
    return list(range(offset, n_steps - window + 1, window))


def predict(params: ModelParams, values, visible, nbr, window: int, stride: int | None = None):
    """Normalized predictions [N, T, C_out] in eval mode.

    Windows of ``window`` steps start every ``stride`` steps (default
    ``window // 3``).  Each step is read from the earliest window that holds
    it short of that window's last position, which gives it the most causal
    history while keeping the right-hand neighbour the convolution looks at.
    """
    N, T, _ = values.shape
    stride = max(1, window // 3) if stride is None else stride
    if not 1 <= stride <= window:
        raise ValueError(f"stride must lie in [1, window], got {stride}")
    x = model_inputs(values, visible)
    if T <= window:
        return forward_train(params, x[None], nbr)[0][0].astype(np.float64)
    starts = list(range(0, T - window + 1, stride))
    if starts[-1] != T - window:
        starts.append(T - window)
    pred = forward_train(params, np.stack([x[:, s:s + window] for s in starts]), nbr)[0]
    out = np.empty((N, T, params.config.c_out))
    out[:, starts[-1]:] = pred[-1]
    for b in range(len(starts) - 2, -1, -1):
        s = starts[b]
        keep = window - 1 if window > 1 else 1
        out[:, s:s + keep] = pred[b, :, :keep]
    return out


def fit(params: ModelParams, train: TimeSeriesTensor, val: TimeSeriesTensor,
        adjacency: AdjacencyMatrix, cfg: TrainConfig = TrainConfig(), callback=None):
    """Train the non-frozen tensors with masked self-supervision.

    ``train`` and ``val`` are raw-unit segments whose ``observed`` masks must
    already exclude evaluation-held-out entries.  Normalization statistics
    come from ``train`` and are stored on the returned parameters.  Returns
    (best-validation parameters, list of EpochRecord).
    """
    if train.n_steps < cfg.window:
        raise ValueError(f"training segment ({train.n_steps} steps) is shorter than window={cfg.window}")
    params = params.copy()
    train_n, stats = normalize(train)
    val_n, _ = normalize(val, stats)
    params.norm_stats = stats
    nbr = adjacency.neighbours

    val_mask = make_training_mask(val_n.observed, None, cfg.train_mask_ratio, [cfg.seed, 0x5EED])
    val_visible = val_n.observed & ~val_mask
    std = stats.std

    def validate(p):
        pred = predict(p, val_n.values, val_visible, nbr, cfg.window)
        err = ((pred - val_n.values) * std)[val_mask]
        return float(np.abs(err).mean()), float((err * err).mean())

    opt = Adam(params, lr=cfg.learning_rate)
    history = []
    best_mae, best, wait = np.inf, params.copy(), 0
    values = train_n.values
    for epoch in range(cfg.max_epochs):
        if cfg.lr_schedule == "cosine":
            opt.lr = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * epoch / cfg.max_epochs))
        rng = np.random.default_rng([cfg.seed, epoch])
        tmask = make_training_mask(train_n.observed, None, cfg.train_mask_ratio, rng)
        x_all = model_inputs(values, train_n.observed & ~tmask)
        offset = int(rng.integers(0, min(cfg.window, train_n.n_steps - cfg.window + 1)))
        starts = rng.permutation(_windows(train_n.n_steps, cfg.window, offset))
        losses = []
        for step, b0 in enumerate(range(0, len(starts), cfg.batch_size)):
            sel = starts[b0:b0 + cfg.batch_size]
            lmask = np.stack([tmask[:, s:s + cfg.window] for s in sel])
            if not lmask.any():
                continue
            x_in = np.stack([x_all[:, s:s + cfg.window] for s in sel])
            target = np.stack([values[:, s:s + cfg.window] for s in sel])
            A = drop_edge(adjacency, cfg.dropedge_p, rng)
            loss, grads = loss_and_grads(params, x_in, target, lmask, A.neighbours, cfg.loss)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(params, grads)
            losses.append(loss)
        val_mae, val_mse = validate(params)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), val_mae, val_mse)
        history.append(rec)
        log.debug("epoch %d train_loss %.5f val_mae %.5f", epoch, rec.train_loss, val_mae)
        if callback is not None:
            callback(rec, params)
        if val_mae < best_mae:
            best_mae, best, wait = val_mae, params.copy(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                log.info("early stop at epoch %d (best val MAE %.5f)", epoch, best_mae)
                break
    return best, history


def impute(params: ModelParams, data: TimeSeriesTensor, A: AdjacencyMatrix, window: int = 24,
           stride: int | None = None) -> TimeSeriesTensor:
    """Fill unobserved entries with denormalized model predictions.

    Observed entries are copied through unchanged; the result is fully observed.
    """
    if params.norm_stats is None:
        raise ValueError("model has no normalization statistics; train it (or load a trained checkpoint) first")
    stats = params.norm_stats
    data_n, _ = normalize(data, stats)
    pred = predict(params, data_n.values, data_n.observed, A.neighbours, window, stride)
    filled = np.where(data.observed[..., None], data.values, pred * stats.std + stats.mean)
    return replace(data, values=filled, observed=np.ones_like(data.observed), node_ids=list(data.node_ids))


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mae", "val_mse"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.val_mse)])


def read_config_file(path) -> dict:
    """``key = value`` lines with ``#`` comments -> dict of strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out
