"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--epoch]

Each kernel is timed on both backends with identical inputs (numba is
warmed up first so compilation is excluded).  ``--epoch`` also times one
BPR+UIB training epoch on a 10%-user ML1M-like synthetic log.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from uibrec import _accel, kernels, synthetic
from uibrec.dataset import prepare_bundle, sample_batch
from uibrec.training import TrainConfig, AdagradState, adagrad_step, batch_objective, init_model


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    n_users, n_items, d, n = 6000, 3700, 32, 1024 * 33
    P, Q = rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d))
    ia, ib = rng.integers(0, n_users, n), rng.integers(0, n_items, n)
    g = rng.normal(size=n)
    data = synthetic.like("ml1m", seed=0, user_fraction=0.1)
    qu = rng.integers(0, data.n_users, n)
    qx = rng.integers(0, data.n_items, n)
    _ = data.keys
    acc = np.abs(rng.normal(size=(n_items, d)))
    rows = np.unique(ib)[:2000]
    grow = rng.normal(size=(rows.size, d))
    gP, gQ = np.zeros_like(P), np.zeros_like(Q)
    return {
        "observed_mask": lambda: kernels.observed_mask(data.indptr, data.indices, data.n_items, qu, qx, data.keys),
        "rowdot": lambda: kernels.rowdot(P, Q, ia, ib),
        "neg_sqdist": lambda: kernels.neg_sqdist(P, Q, ia, ib),
        "dot_backward": lambda: kernels.dot_backward(P, Q, ia, ib, g, gP, gQ),
        "sqdist_backward": lambda: kernels.sqdist_backward(P, Q, ia, ib, g, gP, gQ),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(gQ, ib, np.broadcast_to(g[:, None], (n, d))),
        "adagrad_rows": lambda: kernels.adagrad_rows(Q.copy(), acc.copy(), rows, grow, 0.1, 1e-10),
        "count_ge": lambda: kernels.count_ge(g[:1024], g[1024:].reshape(1024, -1)),
    }


def one_epoch(bundle, n_batches=None):
    cfg = TrainConfig.from_preset("bpr-uib", "ml1m", seed=0)
    st = init_model(cfg, bundle)
    opt = AdagradState.zeros_like(st)
    rng = np.random.default_rng(0)
    spec = cfg.loss_spec()
    n = n_batches or -(-bundle.train.n_interactions // cfg.batch_size)
    for _ in range(n):
        res = batch_objective(st, spec, sample_batch(bundle.train, cfg.batch_size, cfg.negatives, rng))
        adagrad_step(st, opt, res.grads, cfg.lr, cfg.tau)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epoch", action="store_true", help="also time one full training epoch")
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fn in cases.items():
        res = {}
        for be in ("numba", "numpy"):
            prev = _accel.set_backend(be)
            try:
                fn()
                res[be] = best_of(fn, args.repeat)
            finally:
                _accel.set_backend(prev)
        print(f"{name:<18}{res['numba'] * 1e3:>10.2f}{res['numpy'] * 1e3:>10.2f}{res['numpy'] / res['numba']:>8.1f}x")
    if args.epoch:
        bundle = prepare_bundle(synthetic.like("ml1m", seed=0, user_fraction=0.1), "ml1m-10")
        res = {}
        for be in ("numba", "numpy"):
            prev = _accel.set_backend(be)
            try:
                one_epoch(bundle, 2)
                res[be] = best_of(lambda: one_epoch(bundle), 1)
            finally:
                _accel.set_backend(prev)
        print(f"{'epoch bpr-uib':<18}{res['numba']:>9.2f}s{res['numpy']:>9.2f}s{res['numpy'] / res['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
