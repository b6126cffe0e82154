"""Time the numba and numpy kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import random
import timeit

import numpy as np

from tracehunt import kernels
from tracehunt.solver import Binary, Cmp, Const, SymByte, compile_postfix


def postfix_case():
    b0, b1 = SymByte(0), SymByte(1)
    e = Cmp("ult", Binary("xor", Binary("mul", b0, Const(31)), Binary("shl", b1, Const(3))), Const(1000))
    ops, args = compile_postfix(e, {0: 0, 1: 1})
    grid = np.stack(np.meshgrid(np.arange(256), np.arange(256), indexing="ij"), -1).reshape(-1, 2)
    return ops, args, grid.astype(np.uint64)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=400)
    args = ap.parse_args()

    ops, pargs, grid = postfix_case()
    pts = np.random.default_rng(random.randrange(1 << 30)).normal(size=(args.points, 21))
    cases = {
        "postfix/65536 rows": (lambda: kernels.eval_postfix_numpy(ops, pargs, grid),
                               lambda: kernels.eval_postfix_numba(ops, pargs, grid)),
        f"neighbours/{args.points} pts": (lambda: kernels.neighbor_matrix_numpy(pts, 2.0),
                                         lambda: kernels.neighbor_matrix_numba(pts, 2.0)),
    }
    print(f"numba available: {kernels.HAVE_NUMBA}; default path uses numba: {kernels.USE_NUMBA}")
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn) in cases.items():
        assert np.array_equal(np_fn(), nb_fn())  # also warms the JIT
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
