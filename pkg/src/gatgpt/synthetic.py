"""Synthetic ring-graph sensor data with daily seasonality and spatially
correlated smooth fluctuations; used by tests, the acceptance suite and the
benchmark."""
from __future__ import annotations

from datetime import datetime

import numpy as np

from .dataset import AdjacencyMatrix, TimeSeriesTensor, build_adjacency


def _smooth_noise(rng, n_series, n_steps, width):
    """Gaussian-filtered white noise scaled to unit std per series."""
    half = int(4 * width)
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    k /= k.sum()
    raw = rng.standard_normal((n_series, n_steps + 2 * half))
    out = np.stack([np.convolve(r, k, mode="valid") for r in raw])
    return out / out.std(axis=1, keepdims=True)


def make_ring_fixture(n_nodes: int = 8, n_steps: int = 2000, noise: float = 0.05,
                      period: int = 24, coupling: float = 0.7, smooth_width: float = 6.0,
                      seed: int = 0):
    """Return (tensor, distances, adjacency).

    Node n carries ``level_n + amp_n * sin(2*pi*t/period + phase_n)`` plus a
    spatially mixed smooth component shared with its ring neighbours, plus
    i.i.d. Gaussian noise of std ``noise``.  Steps are hourly, starting at
    midnight, so ``period=24`` is a daily cycle.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps)
    level = rng.uniform(-1.0, 1.0, n_nodes)
    amp = rng.uniform(0.8, 1.2, n_nodes)
    phase = rng.uniform(0, 2 * np.pi, n_nodes)
    season = amp[:, None] * np.sin(2 * np.pi * t[None] / period + phase[:, None])

    z = _smooth_noise(rng, n_nodes, n_steps, smooth_width)
    mix = np.eye(n_nodes)
    for n in range(n_nodes):
        mix[n, (n - 1) % n_nodes] = mix[n, (n + 1) % n_nodes] = 0.6
    shared = mix @ z
    shared /= shared.std(axis=1, keepdims=True)

    values = level[:, None] + season + coupling * shared + noise * rng.standard_normal((n_nodes, n_steps))
    tensor = TimeSeriesTensor(values[:, :, None], np.ones((n_nodes, n_steps), dtype=bool),
                              node_ids=[f"s{n}" for n in range(n_nodes)], step_seconds=3600,
                              start=datetime(2024, 1, 1))
    distances = [(n, (n + 1) % n_nodes, 1.0) for n in range(n_nodes)]
    A: AdjacencyMatrix = build_adjacency(distances, n_nodes, sigma=1.0, threshold=0.1)
    return tensor, distances, A
