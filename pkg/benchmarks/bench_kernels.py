"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per call for both implementations
and their ratio. Outputs are compared before timing so a speedup never
hides a disagreement.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from freegrad import kernels
from freegrad.kalman import make_kinematic_scenario, optimal_rate


def cases(rng: np.random.Generator):
    x = rng.normal(size=(16, 3, 28, 28))
    w = rng.normal(size=(8, 3, 5, 5))
    g = rng.normal(size=(16, 8, 24, 24))
    pool_in = rng.normal(size=(16, 8, 24, 24))
    _, arg = kernels.fallback.maxpool2d_forward(pool_in, 2)
    pool_g = rng.normal(size=(16, 8, 12, 12))

    model, sc = make_kinematic_scenario(horizon=2000, seed=0)
    n = len(model.A)
    prec_x = np.broadcast_to(np.linalg.inv(model.Q), (sc.horizon, n, n)).copy()
    prec_z = np.linalg.inv(model.R)
    rates = np.full(sc.horizon, optimal_rate(prec_x[0], model, prec_z))
    filt = (model.A, model.B, model.C, prec_x, prec_z, sc.observations, sc.controls, sc.x0, 5, rates)

    yield "conv2d_forward 16x3x28x28 * 8x3x5x5", "conv2d_forward", (x, w)
    yield "conv2d_backward_input", "conv2d_backward_input", (g, w, 28, 28)
    yield "conv2d_backward_weight", "conv2d_backward_weight", (x, g, 5, 5)
    yield "maxpool2d_forward 2x2", "maxpool2d_forward", (pool_in, 2)
    yield "maxpool2d_backward 2x2", "maxpool2d_backward", (pool_g, arg, 24, 24)
    yield "grad_filter_run 2000 steps x 5", "grad_filter_run", filt


def best_time(fn, args, repeat: int) -> float:
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10, equal_nan=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not built; run 'pip install -e . --no-build-isolation' first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38} {'cython':>12} {'numpy':>12} {'speedup':>8}")
    for label, name, call_args in cases(rng):
        c_fn, p_fn = getattr(kernels.compiled, name), getattr(kernels.fallback, name)
        if not same(c_fn(*call_args), p_fn(*call_args)):
            print(f"{label}: implementations disagree", file=sys.stderr)
            return 1
        tc, tp = best_time(c_fn, call_args, args.repeat), best_time(p_fn, call_args, args.repeat)
        print(f"{label:<38} {tc * 1e3:10.3f}ms {tp * 1e3:10.3f}ms {tp / tc:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
