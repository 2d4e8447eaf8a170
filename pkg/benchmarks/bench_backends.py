"""Micro-benchmark of the two MLP kernel backends.

The sampler evaluates the drift net one trajectory row at a time (the
density-bearing path), so single-row latency dominates RL wall time, while
pretraining calls the same kernels at batch size ~256. This script times
forward and backward for both backends at both shapes and reports the
per-call latency and the compiled-over-numpy speedup.

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --hidden 128,128 --repeats 20000
"""

import argparse
import time

import numpy as np

from progrpo import _kernels_np
from progrpo.policy import MlpSpec, features, init_policy

try:
    from progrpo import _kernels
except ImportError:
    _kernels = None


def make_case(spec, batch, seed):
    rng = np.random.default_rng(seed)
    params = init_policy(spec, seed=seed)
    # non-zero final layer so backward touches every path
    weights = [np.ascontiguousarray(w + 0.1 * rng.standard_normal(w.shape)) for w in params.weights]
    biases = [np.ascontiguousarray(b + 0.1 * rng.standard_normal(b.shape)) for b in params.biases]
    x = rng.standard_normal((batch, spec.latent_dim))
    t = rng.random(batch)
    contexts = np.zeros(batch, dtype=int)
    feats = features(spec, x, t, contexts)
    upstream = rng.standard_normal((batch, spec.latent_dim))
    return feats, weights, biases, upstream


def time_impl(impl, case, repeats):
    feats, weights, biases, upstream = case
    out, hiddens = impl.mlp_forward(feats, weights, biases)
    impl.mlp_backward(feats, hiddens, weights, upstream)

    start = time.perf_counter()
    for _ in range(repeats):
        out, hiddens = impl.mlp_forward(feats, weights, biases)
    fwd = (time.perf_counter() - start) / repeats

    start = time.perf_counter()
    for _ in range(repeats):
        impl.mlp_backward(feats, hiddens, weights, upstream)
    bwd = (time.perf_counter() - start) / repeats
    return fwd, bwd, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--hidden", default="128,128", help="hidden widths, comma separated")
    parser.add_argument("--repeats", type=int, default=10000, help="timed calls per shape")
    parser.add_argument("--batch", type=int, default=256, help="batched-case rows")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    hidden = tuple(int(h) for h in args.hidden.split(","))
    spec = MlpSpec(hidden=hidden)
    if _kernels is None:
        print("compiled extension not importable; nothing to compare")
        return

    print(f"spec: latent 2, hidden {hidden}, sinusoidal time embedding")
    print(f"{'shape':>10} {'pass':>8} {'numpy us':>10} {'compiled us':>12} {'speedup':>8}")
    for label, batch, repeats in (
        ("row", 1, args.repeats),
        (f"batch {args.batch}", args.batch, max(args.repeats // 20, 1)),
    ):
        case = make_case(spec, batch, args.seed)
        np_fwd, np_bwd, np_out = time_impl(_kernels_np, case, repeats)
        cy_fwd, cy_bwd, cy_out = time_impl(_kernels, case, repeats)
        worst = float(np.max(np.abs(np_out - cy_out)))
        for name, np_t, cy_t in (("forward", np_fwd, cy_fwd), ("backward", np_bwd, cy_bwd)):
            print(
                f"{label:>10} {name:>8} {np_t * 1e6:10.2f} {cy_t * 1e6:12.2f}"
                f" {np_t / cy_t:7.2f}x"
            )
        print(f"{label:>10} agreement: max |numpy - compiled| = {worst:.2e}")


if __name__ == "__main__":
    main()
