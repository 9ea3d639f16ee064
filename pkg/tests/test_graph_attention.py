import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatgpt.dataset import AdjacencyMatrix
from gatgpt.graph_attention import (GatHead, GatParams, drop_edge, gat_backward, gat_forward,
                                    gat_head, gat_multi_head, gat_over_time)


def random_graph(rng, N, p=0.4):
    W = (rng.random((N, N)) < p) * rng.uniform(0.2, 1.0, (N, N))
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 1.0)
    return AdjacencyMatrix(W)


def brute_gat(X, W, a, adj, slope=0.2):
    """Scalar-arithmetic evaluation of one attention head."""
    N, d_in = len(X), len(X[0])
    dh = len(W[0])
    H = [[sum(X[i][c] * W[c][o] for c in range(d_in)) for o in range(dh)] for i in range(N)]
    out = []
    for i in range(N):
        nb = [j for j in range(N) if adj[i][j] > 0]
        e = {}
        for j in nb:
            s = sum(a[o] * H[i][o] for o in range(dh)) + sum(a[dh + o] * H[j][o] for o in range(dh))
            e[j] = s if s > 0 else slope * s
        m = max(e.values())
        z = sum(math.exp(v - m) for v in e.values())
        row = []
        for o in range(dh):
            v = sum(math.exp(e[j] - m) / z * H[j][o] for j in nb)
            row.append(v if v > 0 else math.exp(v) - 1)
        out.append(row)
    return np.array(out)


# ---------------------------------------------------------------- DropEdge

def test_drop_edge_zero_is_identity():
    A = random_graph(np.random.default_rng(0), 6)
    assert drop_edge(A, 0.0, 1) is A


def test_drop_edge_one_keeps_only_self_loops():
    A = random_graph(np.random.default_rng(0), 6, p=0.9)
    B = drop_edge(A, 1.0, 3)
    assert np.array_equal(B.weights, np.diag(np.diag(A.weights)))


def test_drop_edge_binomial_band():
    N = 40
    W = np.zeros((N, N))
    off = np.argwhere(~np.eye(N, dtype=bool))[:1000]
    W[off[:, 0], off[:, 1]] = 1.0
    np.fill_diagonal(W, 1.0)
    A = AdjacencyMatrix(W)
    for seed in range(5):
        B = drop_edge(A, 0.5, seed)
        kept = int((B.weights[~np.eye(N, dtype=bool)] > 0).sum())
        assert 453 <= kept <= 547
        assert np.all(np.diag(B.weights) == 1)


def test_drop_edge_deterministic():
    A = random_graph(np.random.default_rng(1), 10, p=0.8)
    assert np.array_equal(drop_edge(A, 0.3, 5).weights, drop_edge(A, 0.3, 5).weights)


def test_drop_edge_bad_p():
    with pytest.raises(ValueError):
        drop_edge(random_graph(np.random.default_rng(0), 3), 1.5)


# ---------------------------------------------------------------- single head

def test_single_node_self_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3))
    head = GatHead(rng.normal(size=(3, 2)), rng.normal(size=4))
    out, alpha = gat_head(x, AdjacencyMatrix(np.ones((1, 1))), head, return_attention=True)
    assert alpha[0, 0] == 1.0
    h = x @ head.W
    np.testing.assert_allclose(out, np.where(h > 0, h, np.expm1(h)), atol=1e-15)


def test_single_node_nonnegative_is_exact_linear_map():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=(1, 4))
    head = GatHead(rng.uniform(0, 1, size=(4, 3)), rng.normal(size=6))
    out = gat_head(x, AdjacencyMatrix(np.ones((1, 1))), head, slope=1.0)
    assert np.array_equal(out, x @ head.W)


def test_identical_nodes_split_attention_evenly():
    rng = np.random.default_rng(4)
    x = np.tile(rng.normal(size=(1, 3)), (2, 1))
    head = GatHead(rng.normal(size=(3, 2)), rng.normal(size=4))
    _, alpha = gat_head(x, AdjacencyMatrix(np.ones((2, 2))), head, return_attention=True)
    np.testing.assert_allclose(alpha, 0.5, atol=1e-15)


def test_path_graph_matches_brute_force():
    X = [[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4]]
    W = [[0.5, -1.0, 0.2], [0.7, 0.3, -0.4]]
    a = [0.9, -0.3, 0.5, -0.2, 0.6, 1.1]
    adj = [[1, 1, 0], [1, 1, 1], [0, 1, 1]]
    head = GatHead(np.array(W), np.array(a))
    out, alpha = gat_head(np.array(X), AdjacencyMatrix(np.array(adj, float)), head, return_attention=True)
    np.testing.assert_allclose(out, brute_gat(X, W, a, adj), atol=1e-12)
    assert alpha[0, 2] == 0 and alpha[2, 0] == 0


def test_random_graphs_match_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(10):
        N = int(rng.integers(2, 7))
        A = random_graph(rng, N)
        X, W, a = rng.normal(size=(N, 3)), rng.normal(size=(3, 2)), rng.normal(size=4)
        got = gat_head(X, A, GatHead(W, a), slope=0.2)
        np.testing.assert_allclose(got, brute_gat(X.tolist(), W.tolist(), a.tolist(), A.weights.tolist()),
                                   atol=1e-12)


def test_isolated_node_raises():
    W = np.array([[1.0, 0.5], [0.5, 0.0]])
    W[1, 0] = 0
    head = GatHead(np.ones((2, 2)), np.ones(4))
    with pytest.raises(ValueError, match=r"node\(s\) \[1\]"):
        gat_head(np.ones((2, 2)), AdjacencyMatrix(W, self_loops=False), head)


def test_edge_weights_do_not_scale_attention():
    rng = np.random.default_rng(9)
    A = random_graph(rng, 5, p=0.9)
    B = AdjacencyMatrix((A.weights > 0).astype(float))
    X = rng.normal(size=(5, 3))
    head = GatHead(rng.normal(size=(3, 2)), rng.normal(size=4))
    assert np.array_equal(gat_head(X, A, head), gat_head(X, B, head))


# ---------------------------------------------------------------- multi-head and over time

def test_multi_head_single_equals_head():
    rng = np.random.default_rng(10)
    A = random_graph(rng, 4)
    p = GatParams.init(3, 2, 1, rng=rng)
    X = rng.normal(size=(4, 3))
    assert np.array_equal(gat_multi_head(X, A, p), gat_head(X, A, p.heads[0]))


def test_multi_head_duplicate_heads_repeat():
    rng = np.random.default_rng(11)
    A = random_graph(rng, 4)
    h = GatParams.init(3, 2, 1, rng=rng).heads[0]
    X = rng.normal(size=(4, 3))
    out = gat_multi_head(X, A, GatParams([h, h]))
    np.testing.assert_array_equal(out[:, :2], out[:, 2:])


def test_multi_head_slices_match_heads():
    rng = np.random.default_rng(12)
    A = random_graph(rng, 5)
    p = GatParams.init(4, 3, 3, rng=rng)
    X = rng.normal(size=(5, 4))
    out = gat_multi_head(X, A, p)
    for k, h in enumerate(p.heads):
        np.testing.assert_array_equal(out[:, 3 * k:3 * (k + 1)], gat_head(X, A, h))


def test_over_time_single_step():
    rng = np.random.default_rng(13)
    A = random_graph(rng, 4)
    p = GatParams.init(3, 2, 2, rng=rng)
    X = rng.normal(size=(4, 1, 3))
    np.testing.assert_allclose(gat_over_time(X, A, p)[:, 0], gat_multi_head(X[:, 0], A, p), atol=1e-14)


def test_over_time_time_permutation():
    rng = np.random.default_rng(14)
    A = random_graph(rng, 4)
    p = GatParams.init(3, 2, 2, rng=rng)
    X = rng.normal(size=(4, 6, 3))
    perm = rng.permutation(6)
    np.testing.assert_allclose(gat_over_time(X[:, perm], A, p), gat_over_time(X, A, p)[:, perm], atol=1e-14)


def test_gradients_finite_difference():
    rng = np.random.default_rng(15)
    A = random_graph(rng, 4, p=0.7)
    p = GatParams.init(3, 2, 2, rng=rng)
    X = rng.normal(size=(4, 3, 3))
    R = rng.normal(size=(4, 3, 4))

    def loss():
        return float(np.sum(R * gat_forward(X, A, p)[0]))

    out, cache = gat_forward(X, A, p)
    dX, grads = gat_backward(R, cache, p)
    h = 1e-4
    for k, head in enumerate(p.heads):
        for arr, g in ((head.W, grads[k][0]), (head.a, grads[k][1])):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp = loss()
                arr[idx] = old - h
                lm = loss()
                arr[idx] = old
                num = (lp - lm) / (2 * h)
                assert abs(num - g[idx]) <= 1e-3 * max(abs(num), 1e-3)
    for idx in [(0, 0, 0), (3, 2, 1), (1, 1, 2)]:
        old = X[idx]
        X[idx] = old + h
        lp = loss()
        X[idx] = old - h
        lm = loss()
        X[idx] = old
        assert abs((lp - lm) / (2 * h) - dX[idx]) <= 1e-3 * max(abs(dX[idx]), 1e-3)


# ---------------------------------------------------------------- invariants

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_softmax_rows_and_support(N, seed):
    rng = np.random.default_rng(seed)
    A = random_graph(rng, N)
    head = GatHead(rng.normal(size=(3, 2)), rng.normal(size=4))
    _, alpha = gat_head(rng.normal(size=(N, 3)), A, head, return_attention=True)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(alpha >= 0)
    assert np.all(alpha[A.weights == 0] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_node_permutation_equivariance(N, seed):
    rng = np.random.default_rng(seed)
    A = random_graph(rng, N)
    p = GatParams.init(3, 2, 2, rng=rng)
    X = rng.normal(size=(N, 3))
    pi = rng.permutation(N)
    PA = AdjacencyMatrix(A.weights[np.ix_(pi, pi)])
    np.testing.assert_allclose(gat_multi_head(X[pi], PA, p), gat_multi_head(X, A, p)[pi], atol=1e-12)
