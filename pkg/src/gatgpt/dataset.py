"""Series ingestion, adjacency construction, evaluation masks and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from . import _kernels


class DataError(ValueError):
    """Malformed input data (bad CSV, inconsistent shapes, degenerate stats)."""


@dataclass
class TimeSeriesTensor:
    """Values [N, T, C] with an observed mask [N, T].

    Entries where ``observed`` is false hold a sentinel (NaN in raw tensors,
    0 after normalization) and must only be read through a fill policy.
    """

    values: np.ndarray
    observed: np.ndarray
    node_ids: list = field(default_factory=list)
    step_seconds: int = 3600
    start: datetime | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise DataError(f"values must be [N, T, C], got shape {self.values.shape}")
        N, T, C = self.values.shape
        if min(N, T, C) < 1:
            raise DataError(f"empty tensor of shape {self.values.shape}")
        if self.observed.shape != (N, T):
            raise DataError(
                f"observed mask shape {self.observed.shape} does not match values [N, T] = {(N, T)}")
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(N)]
        elif len(self.node_ids) != N:
            raise DataError(f"{len(self.node_ids)} node ids for {N} nodes")
        if self.step_seconds <= 0:
            raise DataError("step_seconds must be positive")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_nodes(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    @property
    def n_channels(self):
        return self.values.shape[2]

    def window(self, start: int, stop: int) -> "TimeSeriesTensor":
        """Steps [start, stop) as a new tensor (copies)."""
        t0 = None
        if self.start is not None:
            t0 = self.start + timedelta(seconds=start * self.step_seconds)
        return replace(self, values=self.values[:, start:stop].copy(),
                       observed=self.observed[:, start:stop].copy(), start=t0,
                       node_ids=list(self.node_ids))

    def hide(self, hidden: np.ndarray) -> "TimeSeriesTensor":
        """Copy with ``hidden`` entries marked unobserved and set to NaN."""
        hidden = _as_bool_mask(hidden)
        observed = self.observed & ~hidden
        values = self.values.copy()
        values[~observed] = np.nan
        return replace(self, values=values, observed=observed, node_ids=list(self.node_ids))

    def timestamps(self) -> list:
        start = self.start or datetime(1970, 1, 1)
        step = timedelta(seconds=self.step_seconds)
        return [start + i * step for i in range(self.n_steps)]


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    self_loops: bool = True

    @property
    def n_nodes(self):
        return self.weights.shape[0]

    @property
    def neighbours(self) -> np.ndarray:
        """Boolean topology: j is a neighbour of i iff weights[i, j] > 0."""
        return self.weights > 0


@dataclass
class EvalMask:
    hidden: np.ndarray
    pattern: str = "point"
    seed: int = 0

    def window(self, start: int, stop: int) -> "EvalMask":
        return replace(self, hidden=self.hidden[:, start:stop].copy())

    @property
    def count(self) -> int:
        return int(self.hidden.sum())


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0:
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


def _as_bool_mask(mask) -> np.ndarray:
    if isinstance(mask, EvalMask):
        return mask.hidden
    return np.asarray(mask, dtype=bool)


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------

def _parse_time(text: str, lineno: int, path) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{path}:{lineno}: bad ISO-8601 timestamp {text!r}") from None


def _parse_cell(text: str, lineno: int, col: str, path) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: column {col!r}: non-finite value {text!r}")
    return v


def _read_grid(path):
    """Header + timestamps + raw float rows of a timestamp-indexed CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "timestamp":
            raise DataError(
                f"{path}:1: malformed header; expected 'timestamp,<node_0>,...', got {','.join(header)!r}")
        nodes = [h.strip() for h in header[1:]]
        if len(set(nodes)) != len(nodes) or any(not n for n in nodes):
            raise DataError(f"{path}:1: node column names must be unique and non-empty")
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
            times.append((_parse_time(row[0], lineno, path), lineno))
            rows.append([_parse_cell(c, lineno, nodes[k], path) for k, c in enumerate(row[1:])])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return nodes, times, np.array(rows, dtype=np.float64)


def _check_steps(times, step_seconds: int, path):
    step = timedelta(seconds=step_seconds)
    for (prev, _), (cur, lineno) in zip(times, times[1:]):
        if cur <= prev:
            raise DataError(f"{path}:{lineno}: timestamp {cur.isoformat()} is not after {prev.isoformat()}")
        if cur - prev != step:
            raise DataError(
                f"{path}:{lineno}: gap in timestamps: {prev.isoformat()} -> {cur.isoformat()} "
                f"(expected a step of {step_seconds} s)")


def load_csv(data_path, step_seconds: int | None = None) -> TimeSeriesTensor:
    """Read ``timestamp,<node...>`` CSV into a single-channel tensor.

    Empty or NaN cells become unobserved.  With ``step_seconds=None`` the step
    is taken from the first two rows.  Timestamps must increase by exactly one
    step per row.
    """
    nodes, times, grid = _read_grid(data_path)
    if step_seconds is None:
        step_seconds = int((times[1][0] - times[0][0]).total_seconds()) if len(times) > 1 else 3600
        if step_seconds <= 0:
            raise DataError(f"{data_path}:{times[1][1]}: timestamps are not increasing")
    _check_steps(times, step_seconds, data_path)
    values = grid.T[:, :, None]
    observed = ~np.isnan(grid.T)
    return TimeSeriesTensor(values, observed, node_ids=nodes, step_seconds=step_seconds,
                            start=times[0][0])


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(t: TimeSeriesTensor, path, channel: int = 0):
    """Write one channel of ``t`` in the data CSV layout (missing -> empty)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *t.node_ids])
        for k, ts in enumerate(t.timestamps()):
            w.writerow([ts.isoformat()] + [
                _fmt(t.values[n, k, channel]) if t.observed[n, k] else ""
                for n in range(t.n_nodes)])


def save_mask_csv(mask: EvalMask, t: TimeSeriesTensor, path):
    """Mask CSV: same layout as the data file, 1 = hidden for evaluation."""
    hidden = _as_bool_mask(mask)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *t.node_ids])
        for k, ts in enumerate(t.timestamps()):
            w.writerow([ts.isoformat()] + ["1" if hidden[n, k] else "0" for n in range(t.n_nodes)])


def load_mask_csv(path, t: TimeSeriesTensor | None = None, pattern: str = "point") -> EvalMask:
    nodes, times, grid = _read_grid(path)
    if np.isnan(grid).any() or not np.isin(grid, (0.0, 1.0)).all():
        raise DataError(f"{path}: mask cells must be 0 or 1")
    hidden = grid.T.astype(bool)
    if t is not None:
        if nodes != list(t.node_ids):
            raise DataError(f"{path}:1: mask columns do not match data columns")
        if hidden.shape != (t.n_nodes, t.n_steps):
            raise DataError(f"{path}: mask has {hidden.shape[1]} rows, data has {t.n_steps}")
    return EvalMask(hidden, pattern=pattern, seed=0)


def load_distances(path, node_ids: Sequence[str] | None = None) -> list:
    """Read ``from,to,distance`` rows into (i, j, d) index triples.

    Node references are matched against ``node_ids`` when given, otherwise
    parsed as integer indices.
    """
    lookup = {str(n): i for i, n in enumerate(node_ids)} if node_ids is not None else None
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header != ["from", "to", "distance"]:
            raise DataError(f"{path}:1: malformed header; expected 'from,to,distance'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, found {len(row)}")
            ends = []
            for ref in row[:2]:
                ref = ref.strip()
                if lookup is not None:
                    if ref not in lookup:
                        raise DataError(f"{path}:{lineno}: unknown node {ref!r}")
                    ends.append(lookup[ref])
                else:
                    try:
                        ends.append(int(ref))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: node index {ref!r} is not an integer") from None
            d = _parse_cell(row[2], lineno, "distance", path)
            if math.isnan(d) or d < 0:
                raise DataError(f"{path}:{lineno}: distance must be a nonnegative number")
            out.append((ends[0], ends[1], d))
    return out


def save_adjacency_csv(A: AdjacencyMatrix, node_ids, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", *node_ids])
        for n, row in zip(node_ids, A.weights):
            w.writerow([n] + [_fmt(v) for v in row])


def load_adjacency_csv(path) -> tuple[AdjacencyMatrix, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][0] != "node":
        raise DataError(f"{path}:1: malformed adjacency header")
    nodes = rows[0][1:]
    try:
        W = np.array([[float(c) for c in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if W.shape != (len(nodes), len(nodes)):
        raise DataError(f"{path}: adjacency must be square over {len(nodes)} nodes")
    loops = bool(len(nodes)) and bool(np.all(np.diag(W) == 1.0))
    return AdjacencyMatrix(W, self_loops=loops), nodes


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------

def build_adjacency(distances: Iterable, n_nodes: int, sigma="auto", threshold: float = 0.1,
                    self_loops: bool = True) -> AdjacencyMatrix:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` over pairwise distances.

    ``distances`` holds (i, j, d) triples; a pair listed in either direction
    (or twice) is symmetrized by taking the smaller distance.  Pairs never
    listed get weight 0.  ``sigma="auto"`` uses the population standard
    deviation of every listed distance.  Weights not strictly above
    ``threshold`` are zeroed.
    """
    triples = [(int(i), int(j), float(d)) for i, j, d in distances]
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    if not 0 <= threshold < 1:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    D = np.full((n_nodes, n_nodes), np.inf)
    for i, j, d in triples:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(f"node index out of range in pair ({i}, {j}) for {n_nodes} nodes")
        if d < 0 or math.isnan(d):
            raise ValueError(f"negative or NaN distance for pair ({i}, {j})")
        D[i, j] = min(D[i, j], d)
    D = np.minimum(D, D.T)
    if isinstance(sigma, str):
        if sigma.lower() != "auto":
            raise ValueError(f"sigma must be positive or 'auto', got {sigma!r}")
        sigma = float(np.std([d for _, _, d in triples])) if triples else 0.0
        if sigma <= 0:
            raise ValueError("sigma='auto' needs at least two distinct distances")
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    with np.errstate(over="ignore", invalid="ignore"):
        W = np.exp(-np.square(D / sigma))
    W[~np.isfinite(D)] = 0.0
    W[W <= threshold] = 0.0
    np.fill_diagonal(W, 1.0 if self_loops else 0.0)
    return AdjacencyMatrix(W, self_loops=self_loops)


# ---------------------------------------------------------------------------
# evaluation masks
# ---------------------------------------------------------------------------

def gen_point_mask(t: TimeSeriesTensor, ratio: float, seed: int = 0) -> EvalMask:
    """Hide each observed entry independently with probability ``ratio``."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    hidden = (rng.random(t.observed.shape) < ratio) & t.observed
    return EvalMask(hidden, pattern="point", seed=seed)


def hours_to_steps(hours: float, step_seconds: int) -> int:
    return max(1, int(round(hours * 3600 / step_seconds)))


def gen_block_mask(t: TimeSeriesTensor, point_ratio: float = 0.05, block_start_prob: float = 0.0015,
                   min_len_steps: int | None = None, max_len_steps: int | None = None,
                   seed: int = 0) -> EvalMask:
    """Sparse point mask united with per-sensor outage blocks.

    At every (sensor, step) a block starts with probability
    ``block_start_prob`` and runs for a length drawn uniformly from
    ``[min_len_steps, max_len_steps]``, clipped at the series end.  Lengths
    default to 1-4 hours converted with ``t.step_seconds``.
    """
    N, T = t.observed.shape
    if min_len_steps is None:
        min_len_steps = hours_to_steps(1, t.step_seconds)
    if max_len_steps is None:
        max_len_steps = hours_to_steps(4, t.step_seconds)
    if not 0 < min_len_steps <= max_len_steps <= T:
        raise ValueError(
            f"need 0 < min_len_steps <= max_len_steps <= T ({T}); got {min_len_steps}, {max_len_steps}")
    for name, p in (("point_ratio", point_ratio), ("block_start_prob", block_start_prob)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    points = rng.random((N, T)) < point_ratio
    starts = rng.random((N, T)) < block_start_prob
    lengths = rng.integers(min_len_steps, max_len_steps + 1, size=(N, T))
    blocks = _kernels.fill_blocks(starts, lengths)
    return EvalMask((points | blocks) & t.observed, pattern="block", seed=seed)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_bounds(n_steps: int, spec: SplitSpec) -> list[tuple[int, int]]:
    """[start, stop) of train, val and test; train/val floored, test takes the rest."""
    n_train = int(math.floor(n_steps * spec.train_frac + 1e-9))
    n_val = int(math.floor(n_steps * spec.val_frac + 1e-9))
    n_test = n_steps - n_train - n_val
    for name, n in (("train", n_train), ("validation", n_val), ("test", n_test)):
        if n <= 0:
            raise ValueError(f"{name} segment is empty for T={n_steps} with {spec}")
    return [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps)]


def split_chronological(t: TimeSeriesTensor, spec: SplitSpec = SplitSpec()):
    return tuple(t.window(a, b) for a, b in split_bounds(t.n_steps, spec))


def split_by_months(t: TimeSeriesTensor, test_months: Sequence[int], val_months: Sequence[int] = (),
                    val_tail_frac: float = 0.1):
    """Month-wise split as boolean step masks (train, val, test).

    Steps in ``test_months`` go to test.  For each month in ``val_months``
    the last ``val_tail_frac`` of that month's steps go to validation.
    Everything else is training data.
    """
    if t.start is None:
        raise ValueError("month-wise split needs a start timestamp")
    months = np.array([ts.month for ts in t.timestamps()])
    years = np.array([ts.year for ts in t.timestamps()])
    test = np.isin(months, list(test_months))
    val = np.zeros_like(test)
    for m in val_months:
        for y in np.unique(years):
            idx = np.nonzero((months == m) & (years == y))[0]
            n_tail = int(math.ceil(len(idx) * val_tail_frac))
            if n_tail:
                val[idx[-n_tail:]] = True
    train = ~(test | val)
    return train, val, test


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def compute_stats(t: TimeSeriesTensor) -> NormStats:
    """Per-channel mean/std over observed entries only."""
    obs = t.values[t.observed]                      # [n_obs, C]
    if obs.shape[0] == 0:
        raise DataError("cannot compute normalization statistics: no observed entries")
    mean = obs.mean(axis=0)
    std = obs.std(axis=0)
    for c, s in enumerate(std):
        if not s > 0:
            raise DataError(f"channel {c} is constant over the observed training entries (zero std)")
    return NormStats(mean, std)


def normalize(t: TimeSeriesTensor, stats: NormStats | None = None):
    """Standardize observed entries; unobserved entries become 0."""
    if stats is None:
        stats = compute_stats(t)
    values = np.where(t.observed[..., None], (t.values - stats.mean) / stats.std, 0.0)
    return replace(t, values=values, node_ids=list(t.node_ids)), stats


def denormalize(t: TimeSeriesTensor, stats: NormStats) -> TimeSeriesTensor:
    values = t.values * stats.std + stats.mean
    return replace(t, values=values, node_ids=list(t.node_ids))
