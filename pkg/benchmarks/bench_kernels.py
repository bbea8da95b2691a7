"""Time the numba kernels against their pure-numpy fallbacks.

The workload mirrors a training batch: a ragged edge set grouped by
destination node, with the segment softmax / weighted-sum / scatter kernels
that dominate the attention layers.  Run:

    python benchmarks/bench_kernels.py [--nodes 20000] [--degree 8] [--dim 64]

With FGNN_DISABLE_NUMBA=1 (or numba missing) only the numpy path is timed.
"""

import argparse
import time

import numpy as np

from fgnn import kernels as K


def build_workload(n_nodes: int, degree: int, dim: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 2 * degree, size=n_nodes)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n_edges = int(offsets[-1])
    return {
        "offsets": offsets,
        "scores": rng.normal(size=n_edges),
        "mask": rng.random(n_edges) < 0.7,
        "rows": rng.normal(size=(n_edges, dim)),
        "weights": rng.normal(size=n_edges),
        "grad_seg": rng.normal(size=(n_nodes, dim)),
        "grad_flat": rng.normal(size=n_edges),
        "idx": rng.integers(0, n_nodes, size=n_edges).astype(np.int64),
        "n_nodes": n_nodes,
        "dim": dim,
        "n_edges": n_edges,
    }


def timeit(fn, repeats: int) -> float:
    fn()  # warm up (JIT compile, caches)
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(w):
    alpha = K._segment_softmax_np(w["scores"], w["offsets"])

    def scatter(impl):
        out = np.zeros((w["n_nodes"], w["dim"]))
        return lambda: impl(out, w["idx"], w["rows"])

    return [
        ("segment_softmax",
         lambda impl: (lambda: impl(w["scores"], w["offsets"]))),
        ("masked_segment_softmax",
         lambda impl: (lambda: impl(w["scores"], w["offsets"], w["mask"]))),
        ("segment_softmax_grad",
         lambda impl: (lambda: impl(alpha, w["grad_flat"], w["offsets"]))),
        ("segment_weighted_sum",
         lambda impl: (lambda: impl(w["weights"], w["rows"], w["offsets"]))),
        ("segment_weighted_sum_grad",
         lambda impl: (lambda: impl(w["weights"], w["rows"], w["grad_seg"], w["offsets"]))),
        ("scatter_add_rows", scatter),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--nodes", type=int, default=20_000)
    parser.add_argument("--degree", type=int, default=8)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    w = build_workload(args.nodes, args.degree, args.dim)
    print(f"workload: {w['n_nodes']} nodes, {w['n_edges']} edges, dim {w['dim']}")
    print(f"active backend: {K.BACKEND}\n")

    header = f"{'kernel':28} {'numpy':>10}"
    if K.HAS_NUMBA:
        header += f" {'numba':>10} {'speedup':>8}"
    print(header)
    for name, make in cases(w):
        np_impl = getattr(K, f"_{name}_np")
        np_time = timeit(make(np_impl), args.repeats)
        line = f"{name:28} {np_time * 1e3:9.2f}ms"
        if K.HAS_NUMBA:
            nb_impl = getattr(K, f"_{name}_nb")
            nb_time = timeit(make(nb_impl), args.repeats)
            line += f" {nb_time * 1e3:9.2f}ms {np_time / nb_time:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
