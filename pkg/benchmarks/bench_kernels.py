"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends live in ``trgs._kernels`` whatever ``TRGS_DISABLE_NUMBA`` says,
so one process can time them side by side. The first numba call (compilation)
is excluded.
"""
import argparse
import time

import numpy as np

from trgs import _kernels as K


def best_of(fn, repeat):
    out = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - t0)
    return out


def cases(gen):
    rows = gen.standard_normal((20000, 16))
    n = 40
    A = gen.standard_normal((n, n))
    sig, V = np.linalg.eigh(A + A.T)
    g = gen.standard_normal(n)
    gam2 = (V.T @ g) ** 2
    hi = np.linalg.norm(g) / 0.5 + np.abs(sig).max()
    lo = max(0.0, -sig[0])
    B = gen.standard_normal((4, 4))
    B = B + B.T
    g4 = gen.standard_normal(4)
    z4 = np.zeros(4)
    return [
        ("kahan_mean 20000x16", lambda: K.kahan_mean_numba(rows), lambda: K.kahan_mean_numpy(rows)),
        ("secular_newton n=40",
         lambda: K.secular_newton_numba(sig, gam2, 0.5, lo, hi, hi, 1e-14, 200),
         lambda: K.secular_newton_numpy(sig, gam2, 0.5, lo, hi, hi, 1e-14, 200)),
        ("grid_ball_topk n=4, 25^4",
         lambda: K.grid_ball_topk_numba(g4, B, 1.0, z4, 1.0, 25, 4),
         lambda: K.grid_ball_topk_numpy(g4, B, 1.0, z4, 1.0, 25, 4)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    if not K.USE_NUMBA:
        raise SystemExit("unset TRGS_DISABLE_NUMBA to compile the numba kernels")
    gen = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  agree")
    for name, fast, slow in cases(gen):
        a = fast()  # compile
        b = slow()
        pa = a if isinstance(a, tuple) else (a,)
        pb = b if isinstance(b, tuple) else (b,)
        if all(np.array_equal(x, y) for x, y in zip(pa, pb)):
            agree = "bitwise"
        elif all(np.allclose(x, y, rtol=1e-12, atol=1e-14) for x, y in zip(pa, pb)):
            agree = "to 1e-12"  # grid coordinates are generated differently
        else:
            agree = "DIFFERS"
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<28}{1e3 * tf:>12.3f}{1e3 * ts:>12.3f}{ts / tf:>10.1f}  {agree}")


if __name__ == "__main__":
    main()
