"""Masked MAE/MSE scoring, the MEAN / DA / kNN baselines, and the layer x width sweep."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .backbone import ModelConfig, init_model
from .dataset import AdjacencyMatrix, EvalMask, SplitSpec, TimeSeriesTensor, split_bounds
from .training import TrainConfig, fit, impute

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    mae: float
    mse: float
    n_scored: int
    pattern: str = ""
    dataset_tag: str = ""
    method: str = ""


def _hidden(mask) -> np.ndarray:
    return mask.hidden if isinstance(mask, EvalMask) else np.asarray(mask, dtype=bool)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, TimeSeriesTensor) else np.asarray(x, dtype=np.float64)


def evaluate(imputed, truth, eval_mask, dataset_tag: str = "", method: str = "") -> MetricsReport:
    """MAE and MSE over the entries of ``eval_mask`` only (original units)."""
    hidden = _hidden(eval_mask)
    if not hidden.any():
        raise ValueError("evaluation mask is empty")
    if isinstance(truth, TimeSeriesTensor) and not truth.observed[hidden].all():
        raise ValueError("evaluation mask covers entries with no ground truth")
    pred = _values(imputed)
    true = _values(truth)
    if pred.ndim == 2:
        pred, true = pred[..., None], true[..., None]
    err = (pred - true)[hidden]
    pattern = eval_mask.pattern if isinstance(eval_mask, EvalMask) else ""
    return MetricsReport(float(np.abs(err).mean()), float((err * err).mean()), int(err.size),
                         pattern, dataset_tag, method)


def write_report_csv(reports, dest):
    """``dest`` is a path or an open text stream."""
    if hasattr(dest, "write"):
        _write_report(reports, dest)
        return
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _write_report(reports, fh)


def _write_report(reports, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["dataset", "pattern", "method", "mae", "mse", "n_scored"])
    for r in reports:
        w.writerow([r.dataset_tag, r.pattern, r.method, repr(r.mae), repr(r.mse), r.n_scored])


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _visible(t: TimeSeriesTensor, eval_mask):
    return t.observed & ~_hidden(eval_mask) if eval_mask is not None else t.observed.copy()


def _node_means(t: TimeSeriesTensor, visible) -> np.ndarray:
    counts = visible.sum(axis=1)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise ValueError(f"node(s) {[t.node_ids[i] for i in empty]} have no visible observations")
    vals = np.where(visible[..., None], t.values, 0.0)
    return vals.sum(axis=1) / counts[:, None]


def _fill(t: TimeSeriesTensor, visible, estimate) -> TimeSeriesTensor:
    values = np.where(visible[..., None], t.values, estimate)
    return replace(t, values=values, observed=np.ones_like(t.observed), node_ids=list(t.node_ids))


def baseline_mean(t: TimeSeriesTensor, eval_mask=None) -> TimeSeriesTensor:
    """Each non-visible entry gets its node's mean over visible entries."""
    visible = _visible(t, eval_mask)
    means = _node_means(t, visible)
    return _fill(t, visible, np.broadcast_to(means[:, None, :], t.values.shape))


def time_of_day_slots(t: TimeSeriesTensor) -> tuple[np.ndarray, int]:
    if 86400 % t.step_seconds:
        raise ValueError(f"step of {t.step_seconds} s does not divide a day")
    per_day = 86400 // t.step_seconds
    first = 0
    if t.start is not None:
        s = t.start
        first = (s.hour * 3600 + s.minute * 60 + s.second) // t.step_seconds
    return (first + np.arange(t.n_steps)) % per_day, per_day


def baseline_da(t: TimeSeriesTensor, eval_mask=None) -> TimeSeriesTensor:
    """Daily average: mean of the node's visible values at the same time of day.

    Slots never seen for a node fall back to that node's overall mean.
    """
    visible = _visible(t, eval_mask)
    means = _node_means(t, visible)
    slot, per_day = time_of_day_slots(t)
    onehot = np.zeros((t.n_steps, per_day))
    onehot[np.arange(t.n_steps), slot] = 1.0
    vis = visible.astype(np.float64)
    sums = np.einsum("nt,ntc,ts->nsc", vis, np.where(visible[..., None], t.values, 0.0), onehot)
    counts = vis @ onehot                                            # [N, slots]
    with np.errstate(invalid="ignore", divide="ignore"):
        slot_mean = np.where(counts[..., None] > 0, sums / counts[..., None], means[:, None, :])
    return _fill(t, visible, slot_mean[:, slot, :])


def nearest_neighbours(A: AdjacencyMatrix, k: int) -> np.ndarray:
    """[N, k] indices of the k highest-weight other nodes (-1 padded); ties by index."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    W = A.weights.copy()
    np.fill_diagonal(W, 0.0)
    N = W.shape[0]
    out = np.full((N, k), -1, dtype=np.int64)
    for i in range(N):
        cand = np.nonzero(W[i] > 0)[0]
        order = cand[np.lexsort((cand, -W[i, cand]))][:k]
        out[i, :order.size] = order
    return out


def baseline_knn(t: TimeSeriesTensor, A: AdjacencyMatrix, eval_mask=None, k: int = 5) -> TimeSeriesTensor:
    """Mean of the visible values of the k nearest neighbours at the same step.

    Steps where none of those neighbours is visible use the node mean.
    """
    visible = _visible(t, eval_mask)
    means = _node_means(t, visible)
    nb = nearest_neighbours(A, k)
    vals = np.ascontiguousarray(np.where(visible[..., None], t.values, 0.0))
    est = _kernels.knn_fill(vals, np.ascontiguousarray(visible), nb, np.ascontiguousarray(means))
    return _fill(t, visible, est)


# ---------------------------------------------------------------------------
# train/evaluate pipeline and sweep
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    params: object
    history: list
    report: MetricsReport
    imputed: TimeSeriesTensor
    test_bounds: tuple


def train_and_evaluate(data: TimeSeriesTensor, A: AdjacencyMatrix, eval_mask: EvalMask,
                       model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
                       split: SplitSpec = SplitSpec(), init_seed: int | None = None,
                       dataset_tag: str = "") -> PipelineResult:
    """Hide the eval mask, train on the train segment, score the test segment."""
    visible = data.hide(eval_mask)
    (a0, a1), (b0, b1), (c0, c1) = split_bounds(data.n_steps, split)
    params = init_model(model_cfg, train_cfg.seed if init_seed is None else init_seed)
    params, history = fit(params, visible.window(a0, a1), visible.window(b0, b1), A, train_cfg)
    imputed = impute(params, visible.window(c0, c1), A, window=train_cfg.window)
    report = evaluate(imputed, data.window(c0, c1), _hidden(eval_mask)[:, c0:c1],
                      dataset_tag=dataset_tag, method="gatgpt")
    report.pattern = eval_mask.pattern
    return PipelineResult(params, history, report, imputed, (c0, c1))


@dataclass
class SweepRow:
    layers: int
    d_model: int
    mae: float
    mse: float
    seconds: float
    error: str = ""


def sweep(layers, d_models, data: TimeSeriesTensor, A: AdjacencyMatrix, eval_mask: EvalMask,
          train_cfg: TrainConfig = TrainConfig(), split: SplitSpec = SplitSpec(), **model_kw) -> list:
    """Train and score one model per (layers, d_model) cell with a shared seed.

    A failing cell is logged and recorded with NaN metrics; the sweep goes on.
    """
    rows = []
    for L in layers:
        for d in d_models:
            t0 = time.perf_counter()
            try:
                cfg = ModelConfig(c_in=data.n_channels, d_model=int(d), n_layers=int(L), **model_kw)
                res = train_and_evaluate(data, A, eval_mask, cfg, train_cfg, split)
                rows.append(SweepRow(int(L), int(d), res.report.mae, res.report.mse,
                                     time.perf_counter() - t0))
            except Exception as exc:  # one bad cell must not sink the grid
                log.warning("sweep cell layers=%s d_model=%s failed: %s", L, d, exc)
                rows.append(SweepRow(int(L), int(d), float("nan"), float("nan"),
                                     time.perf_counter() - t0, str(exc)))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layers", "d_model", "mae", "mse", "seconds"])
        for r in rows:
            w.writerow([r.layers, r.d_model, repr(r.mae), repr(r.mse), f"{r.seconds:.3f}"])
