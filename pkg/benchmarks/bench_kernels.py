"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--batch 128] [--repeat 5]

Shapes follow the compact model's first stages at a 3200-sample window.
Every pair is also checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from ammobilenet import _kernels as k


def cases(batch, rng):
    xpad = rng.standard_normal((batch, 32, 1608))
    w = rng.standard_normal((32, 9))
    grad = rng.standard_normal((batch, 32, 800))
    x = rng.standard_normal((batch, 32, 800))
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    _, xhat, _, _, inv = k.bn_train_forward_numpy(x, gamma, beta, 1e-5)
    return [
        ("dw_forward", k.dw_forward_numpy, k.dw_forward_numba, (xpad, w, 2, 800)),
        ("dw_backward_input", k.dw_backward_input_numpy, k.dw_backward_input_numba, (grad, w, 2, 1608)),
        ("dw_backward_weight", k.dw_backward_weight_numpy, k.dw_backward_weight_numba, (grad, xpad, 2, 9)),
        ("bn_train_forward", k.bn_train_forward_numpy, k.bn_train_forward_numba, (x, gamma, beta, 1e-5)),
        ("bn_backward", k.bn_backward_numpy, k.bn_backward_numba, (grad, xhat, gamma, inv)),
        ("relu6_forward", k.relu6_forward_numpy, k.relu6_forward_numba, (x * 4,)),
        ("relu6_backward", k.relu6_backward_numpy, k.relu6_backward_numba, (grad, x * 4)),
    ]


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(a - b)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--batch", type=int, default=128, help="batch size")
    ap.add_argument("--repeat", type=int, default=5, help="timed calls per kernel (best is reported)")
    ap.add_argument("--seed", type=int, default=1234, help="input seed")
    args = ap.parse_args()
    if k.dw_forward_numba is None:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, np_fn, nb_fn, call_args in cases(args.batch, np.random.default_rng(args.seed)):
        call_args = tuple(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a for a in call_args)
        diff = max_diff(np_fn(*call_args), nb_fn(*call_args))   # also triggers compilation
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>7.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()
