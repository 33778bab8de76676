"""Benchmark the JIT hinge kernel against the pure-numpy fallback.

Runs the mining loss/gradient kernel at a production-like size with both
backends and reports per-call wall time plus the result agreement. The
backend used by the package itself is chosen at import via LFA_NUMBA.

    python benchmarks/bench_kernels.py --samples 1600 --classes 100 --dim 512
"""

import argparse
import time

import numpy as np

from lfa._kernels import (NUMBA_ENABLED, _hinge_loss_gu_jit,
                          _hinge_loss_gu_numpy)
from lfa.core import make_rng, normalize_rows
from lfa.refine import margin_matrix


def bench(fn, args, repeats):
    fn(*args)  # warmup / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeats, out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=1600)
    parser.add_argument("--classes", type=int, default=100)
    parser.add_argument("--dim", type=int, default=512)
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()

    rng = make_rng(0)
    u = rng.standard_normal((args.samples, args.dim))
    y = normalize_rows(rng.standard_normal((args.classes, args.dim)))
    labels = rng.integers(0, args.classes, args.samples)
    margins = margin_matrix(y, 4.0)
    call = (u, y, np.ascontiguousarray(labels, dtype=np.int64), margins, args.k)

    t_np, (loss_np, g_np) = bench(_hinge_loss_gu_numpy, call, args.repeats)
    print(f"numpy : {t_np * 1e3:9.2f} ms/call   loss={loss_np:.6f}")
    if NUMBA_ENABLED:
        t_nb, (loss_nb, g_nb) = bench(_hinge_loss_gu_jit, call, args.repeats)
        rel = abs(loss_nb - loss_np) / max(abs(loss_np), 1e-300)
        print(f"numba : {t_nb * 1e3:9.2f} ms/call   loss={loss_nb:.6f}")
        print(f"speedup x{t_np / t_nb:.2f}   loss rel diff {rel:.2e}   "
              f"grad max diff {np.abs(g_nb - g_np).max():.2e}")
    else:
        print("numba backend disabled (LFA_NUMBA=0 or numba unavailable)")


if __name__ == "__main__":
    main()
