"""Compiled vs pure-numpy timings for the classical kernels.

    python benchmarks/bench_kernels.py [--repeat N]

With SAMIMO_NUMBA=0 both columns run the same uncompiled code.
"""

import argparse
import timeit

import numpy as np

from samimo import _accel
from samimo.kernels import amp_mmv_kernel, somp_kernel, wmmse_kernel
from samimo.rng import RandomSource


def _cases():
    rng = RandomSource(0)
    K, L, M = 32, 12, 16
    A = rng.complex_normal((L, K)) / np.sqrt(L)
    X = np.zeros((K, M), complex)
    X[rng.gen.choice(K, 3, replace=False)] = rng.complex_normal((3, M))
    Y = A @ X + 0.05 * rng.complex_normal((L, M))
    An = A / np.linalg.norm(A, axis=0)
    H = rng.complex_normal((2, 8))
    V0 = H.conj().T / np.linalg.norm(H)
    return {
        "somp": (somp_kernel, (A, Y, 4, 1e-3)),
        "amp": (amp_mmv_kernel, (An, Y, 50, 0.1, float(L), 1e-3)),
        "wmmse": (wmmse_kernel, (H, V0, 1.0, 0.1, np.ones(2), 20, np.ones(20), 64)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    print(f"numba enabled: {_accel.USE_NUMBA}")
    print(f"{'kernel':8s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, (fn, a) in _cases().items():
        fn(*a)  # compile outside the timed region
        t_fast = min(timeit.repeat(lambda: fn(*a), number=args.repeat, repeat=3)) / args.repeat
        t_ref = min(timeit.repeat(lambda: fn.py_func(*a), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:8s} {t_fast * 1e6:10.1f} {t_ref * 1e6:10.1f} {t_ref / t_fast:8.1f}x")


if __name__ == "__main__":
    main()
