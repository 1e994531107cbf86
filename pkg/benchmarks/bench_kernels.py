"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints per-call milliseconds for the pair-score kernels at two graph sizes,
span accumulation, and one full model forward+backward with each backend.
"""
import argparse
import time

import numpy as np

from twin_graph_ad import attention as at
from twin_graph_ad import kernels
from twin_graph_ad import tensorcore as tc
from twin_graph_ad.network import ModelConfig, TwinGraphModel


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def pair_case(n, G, width=32, heads=2):
    rng = np.random.default_rng(0)
    A = (rng.random((n, n)) < 0.3).astype(int)
    np.fill_diagonal(A, 1)
    idx = at.GraphIndex(A)
    sl = idx.node_slots
    P = rng.normal(size=(G, n, width))
    Q = rng.normal(size=(G, n, width))
    C = rng.normal(size=(G, idx.n_edges, width))
    beta = rng.normal(size=(heads, width // heads))
    out = np.empty((G, n, n, heads))
    grad = rng.normal(size=out.shape)
    bufs = [np.zeros_like(P), np.zeros_like(Q), np.zeros_like(C), np.zeros_like(beta)]
    return (P, Q, C, beta, sl.nb, sl.ca, sl.cb, sl.valid), out, grad, bufs


def model_step(N, repeat, impl):
    for name in ("pair_scores_forward", "pair_scores_backward"):
        setattr(kernels, name, getattr(impl, name))
    rng = np.random.default_rng(0)
    A = (rng.random((N, N)) < 0.3).astype(int)
    np.fill_diagonal(A, 1)
    cfg = ModelConfig(n_instances=N, n_metrics=8, n_log_features=9, n_request_types=2, window=10, d_model=16,
                      heads=2, encoder_layers=1, decoder_layers=1, dtype="float32")
    model = TwinGraphModel(cfg, A).train()
    M = rng.random((8, 10, N, 8))
    L = rng.random((8, 10, N, 9))
    S = rng.random((8, 10, N, N, 2)) * A[..., None]

    def step():
        r = model(M, L, S)
        loss = tc.tsum(r.metrics * r.metrics) + tc.tsum(r.traces * r.traces)
        model.zero_grad()
        tc.backward(loss)

    return timeit(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = [("python", kernels.python_impl)]
    if kernels.compiled_impl is not None:
        impls.append(("compiled", kernels.compiled_impl))
    else:
        print("compiled extension not built; timing the fallback only")
    saved = {n: getattr(kernels, n) for n in ("pair_scores_forward", "pair_scores_backward")}

    rows = []
    for n, G in ((5, 200), (40, 10)):
        args_, out, grad, bufs = pair_case(n, G)
        for name, impl in impls:
            fwd = timeit(lambda: impl.pair_scores_forward(*args_, 0.2, -1e9, out), args.repeat)
            bwd = timeit(lambda: impl.pair_scores_backward(grad, *args_, 0.2, *bufs), args.repeat)
            rows.append((f"pair_scores N={n} G={G}", name, fwd, bwd))

    rng = np.random.default_rng(0)
    flat = rng.integers(0, 50_000, size=200_000).astype(np.intp)
    w = rng.random(200_000)
    for name, impl in impls:
        t = timeit(lambda: impl.accumulate(np.zeros(50_000), flat, w), args.repeat)
        rows.append(("accumulate 200k", name, t, float("nan")))

    for name, impl in impls:
        rows.append(("model fwd+bwd N=10 B=8", name, model_step(10, max(3, args.repeat // 5), impl), float("nan")))
    for k, v in saved.items():
        setattr(kernels, k, v)

    print(f"{'case':28s}{'backend':>10s}{'fwd ms':>10s}{'bwd ms':>10s}")
    for case, name, a, b in rows:
        print(f"{case:28s}{name:>10s}{a:10.3f}{b:10.3f}")


if __name__ == "__main__":
    main()
