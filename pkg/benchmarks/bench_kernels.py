"""Time each hot kernel in its numba and pure-numpy flavour.

    python benchmarks/bench_kernels.py [--repeat N] [--epochs]

``--epochs`` additionally times one training epoch on the synthetic fixture
under each backend (selected through GATGPT_PURE_NUMPY in a subprocess).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gatgpt import _kernels as K


def cases(rng):
    for M, N, dh in [(48, 8, 32), (384, 8, 32), (48, 64, 32), (12, 207, 32)]:
        H = rng.normal(size=(M, N, dh)).astype(np.float32)
        src, dst = rng.normal(size=(2, M, N)).astype(np.float32)
        nbr = rng.random((N, N)) < 0.1
        np.fill_diagonal(nbr, True)
        alpha, agg = K.attend_numpy(H, src, dst, nbr, 0.2)
        tag = f"M={M} N={N} dh={dh}"
        yield "attend", tag, (H, src, dst, nbr, 0.2)
        yield "attend_backward", tag, (H, src, dst, alpha, agg, 0.2)
    for N, T in [(36, 8760), (207, 34272)]:
        starts = rng.random((N, T)) < 0.0015
        lengths = rng.integers(12, 49, size=(N, T))
        yield "fill_blocks", f"N={N} T={T}", (starts, lengths)
    for N, T in [(36, 8760), (207, 8640)]:
        values = rng.normal(size=(N, T, 1))
        visible = rng.random((N, T)) > 0.25
        nb = np.stack([rng.choice(N, 5, replace=False) for _ in range(N)])
        yield "knn_fill", f"N={N} T={T}", (values, visible, nb, np.zeros((N, 1)))


def bench(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'shape':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, tag, args in cases(rng):
        fn_np = getattr(K, name + "_numpy")
        fn_nb = getattr(K, name + "_numba")
        t_np = min(timeit.repeat(lambda: fn_np(*args), number=1, repeat=repeat)) * 1e3
        if fn_nb is None:
            print(f"{name:<16} {tag:<24} {t_np:>10.3f} {'n/a':>10}")
            continue
        fn_nb(*args)  # compile outside the timed region
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), number=1, repeat=repeat)) * 1e3
        print(f"{name:<16} {tag:<24} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


EPOCH_SNIPPET = """
import time
from gatgpt import BACKEND, ModelConfig, TrainConfig, fit, init_model
from gatgpt.dataset import gen_point_mask, split_chronological
from gatgpt.synthetic import make_ring_fixture
t, _, A = make_ring_fixture()
tr, va, _ = split_chronological(t.hide(gen_point_mask(t, 0.25, 1).hidden))
p = init_model(ModelConfig(), 0)
fit(p, tr, va, A, TrainConfig(max_epochs=2))  # warm-up (numba compile, caches)
t0 = time.perf_counter()
fit(p, tr, va, A, TrainConfig(max_epochs=15, patience=100))
print(BACKEND, (time.perf_counter() - t0) / 15)
"""


def bench_epochs():
    for flag in ("0", "1"):
        env = dict(os.environ, GATGPT_PURE_NUMPY=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"epoch on synthetic fixture, backend={out[0]:<6} {float(out[1]) * 1e3:8.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epochs", action="store_true", help="also time full training epochs")
    args = ap.parse_args()
    bench(args.repeat)
    if args.epochs:
        bench_epochs()


if __name__ == "__main__":
    main()
