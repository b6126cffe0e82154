"""Numeric kernels with a numba fast path and a pure-numpy fallback.

Set ``TRACEHUNT_DISABLE_NUMBA=1`` to force the numpy implementations (useful
when numba is missing or when debugging).  Both paths are kept callable
explicitly so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - depends on the environment
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TRACEHUNT_DISABLE_NUMBA", "") not in ("1", "true", "yes")

MASK32 = 0xFFFFFFFF

# postfix opcodes for compiled symbolic expressions
OP_CONST = 0
OP_VAR = 1
OP_NOT = 2
OP_NEG = 3
OP_ADD = 4
OP_SUB = 5
OP_MUL = 6
OP_AND = 7
OP_OR = 8
OP_XOR = 9
OP_SHL = 10
OP_SHR = 11
OP_EQ = 12
OP_NE = 13
OP_SLT = 14
OP_SLE = 15
OP_ULT = 16
OP_ULE = 17
OP_LAND = 18
OP_LOR = 19
OP_LNOT = 20


def _maybe_njit(fn):
    if HAVE_NUMBA:
        return _njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# postfix expression evaluation


def _eval_postfix_loop(ops, args, cols):
    # op-major: each opcode sweeps all rows, so dispatch happens once per op
    n = cols.shape[0]
    stack = np.empty((ops.shape[0] + 1, n), dtype=np.uint64)
    mask = np.uint64(0xFFFFFFFF)
    sign = np.uint64(0x80000000)
    one = np.uint64(1)
    zero = np.uint64(0)
    sp = 0
    for k in range(ops.shape[0]):
        op = ops[k]
        if op == 0:
            c = np.uint64(args[k])
            for i in range(n):
                stack[sp, i] = c
            sp += 1
            continue
        if op == 1:
            col = args[k]
            for i in range(n):
                stack[sp, i] = np.uint64(cols[i, col])
            sp += 1
            continue
        t = sp - 1
        if op == 2:
            for i in range(n):
                stack[t, i] = (~stack[t, i]) & mask
            continue
        if op == 3:
            for i in range(n):
                stack[t, i] = (~stack[t, i] + one) & mask
            continue
        if op == 20:
            for i in range(n):
                stack[t, i] = one if stack[t, i] == zero else zero
            continue
        sp -= 1
        a, b = stack[sp - 1], stack[sp]
        if op == 4:
            for i in range(n):
                a[i] = (a[i] + b[i]) & mask
        elif op == 5:
            for i in range(n):
                a[i] = (a[i] - b[i]) & mask
        elif op == 6:
            for i in range(n):
                a[i] = (a[i] * b[i]) & mask
        elif op == 7:
            for i in range(n):
                a[i] = a[i] & b[i]
        elif op == 8:
            for i in range(n):
                a[i] = a[i] | b[i]
        elif op == 9:
            for i in range(n):
                a[i] = a[i] ^ b[i]
        elif op == 10:
            for i in range(n):
                a[i] = (a[i] << (b[i] & np.uint64(31))) & mask
        elif op == 11:
            for i in range(n):
                a[i] = a[i] >> (b[i] & np.uint64(31))
        elif op == 12:
            for i in range(n):
                a[i] = one if a[i] == b[i] else zero
        elif op == 13:
            for i in range(n):
                a[i] = one if a[i] != b[i] else zero
        elif op == 14:
            # flip the sign bit so unsigned order equals signed order
            for i in range(n):
                a[i] = one if (a[i] ^ sign) < (b[i] ^ sign) else zero
        elif op == 15:
            for i in range(n):
                a[i] = one if (a[i] ^ sign) <= (b[i] ^ sign) else zero
        elif op == 16:
            for i in range(n):
                a[i] = one if a[i] < b[i] else zero
        elif op == 17:
            for i in range(n):
                a[i] = one if a[i] <= b[i] else zero
        elif op == 18:
            for i in range(n):
                a[i] = one if (a[i] != zero and b[i] != zero) else zero
        elif op == 19:
            for i in range(n):
                a[i] = one if (a[i] != zero or b[i] != zero) else zero
        else:
            raise ValueError("bad postfix opcode")
    return stack[0].copy()


eval_postfix_numba = _maybe_njit(_eval_postfix_loop)


def eval_postfix_numpy(ops: np.ndarray, args: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Column-at-a-time evaluation: one vectorised numpy op per postfix op."""
    n = cols.shape[0]
    mask = np.uint64(MASK32)
    sign = np.uint64(0x80000000)
    stack: list[np.ndarray] = []
    for op, arg in zip(ops.tolist(), args.tolist()):
        if op == OP_CONST:
            stack.append(np.full(n, arg, dtype=np.uint64))
        elif op == OP_VAR:
            stack.append(cols[:, arg].astype(np.uint64))
        elif op == OP_NOT:
            stack[-1] = (~stack[-1]) & mask
        elif op == OP_NEG:
            stack[-1] = (~stack[-1] + np.uint64(1)) & mask
        elif op == OP_LNOT:
            stack[-1] = (stack[-1] == 0).astype(np.uint64)
        else:
            b = stack.pop()
            a = stack.pop()
            if op == OP_ADD:
                r = (a + b) & mask
            elif op == OP_SUB:
                r = (a - b) & mask
            elif op == OP_MUL:
                r = (a * b) & mask
            elif op == OP_AND:
                r = a & b
            elif op == OP_OR:
                r = a | b
            elif op == OP_XOR:
                r = a ^ b
            elif op == OP_SHL:
                r = (a << (b & np.uint64(31))) & mask
            elif op == OP_SHR:
                r = a >> (b & np.uint64(31))
            elif op == OP_EQ:
                r = (a == b).astype(np.uint64)
            elif op == OP_NE:
                r = (a != b).astype(np.uint64)
            elif op == OP_SLT:
                r = ((a ^ sign) < (b ^ sign)).astype(np.uint64)
            elif op == OP_SLE:
                r = ((a ^ sign) <= (b ^ sign)).astype(np.uint64)
            elif op == OP_ULT:
                r = (a < b).astype(np.uint64)
            elif op == OP_ULE:
                r = (a <= b).astype(np.uint64)
            elif op == OP_LAND:
                r = ((a != 0) & (b != 0)).astype(np.uint64)
            elif op == OP_LOR:
                r = ((a != 0) | (b != 0)).astype(np.uint64)
            else:
                raise ValueError(f"bad postfix opcode {op}")
            stack.append(r)
    return stack[0]


def eval_postfix(ops: np.ndarray, args: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Evaluate a compiled expression on every row of ``cols`` (uint64, N x nvars)."""
    if USE_NUMBA:
        return eval_postfix_numba(ops, args, cols)
    return eval_postfix_numpy(ops, args, cols)


# ---------------------------------------------------------------------------
# neighbourhood queries for density clustering


def _neighbor_matrix_loop(points, eps):
    n = points.shape[0]
    d = points.shape[1]
    eps2 = eps * eps
    out = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        out[i, i] = True
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - points[j, k]
                acc += diff * diff
            if acc <= eps2:
                out[i, j] = True
                out[j, i] = True
    return out


neighbor_matrix_numba = _maybe_njit(_neighbor_matrix_loop)


def neighbor_matrix_numpy(points: np.ndarray, eps: float) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return d2 <= eps * eps


def neighbor_matrix(points: np.ndarray, eps: float) -> np.ndarray:
    """Boolean matrix ``M[i, j] = ||p_i - p_j|| <= eps`` (diagonal true)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA:
        return neighbor_matrix_numba(points, float(eps))
    return neighbor_matrix_numpy(points, float(eps))
