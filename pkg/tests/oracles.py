"""Independent reference implementations and random generators used by the tests.

Nothing here imports the production evaluators; each oracle re-derives the
semantics directly so agreement means something.
"""
from __future__ import annotations

import itertools
import random

import numpy as np

from tracehunt import logic as L
from tracehunt import solver as S
from tracehunt.vm import BINARY_OPS, EventKind, Opcode, Program, parse_program, run_concrete

M32 = 0xFFFFFFFF

# ---------------------------------------------------------------------------
# expressions over <= 2 symbolic bytes, evaluated on the full 65,536 grid

GRID = np.array(list(itertools.product(range(256), repeat=2)), dtype=np.int64)  # (65536, 2)


def _signed(x):
    return np.where(x >= 1 << 31, x - (1 << 32), x)


def grid_eval(e, grid=GRID):
    """Vectorized evaluation of a solver expression; b0/b1 are grid columns."""
    n = len(grid)
    if isinstance(e, S.Const):
        return np.full(n, e.value, dtype=np.int64)
    if isinstance(e, S.SymByte):
        return grid[:, e.index].copy() if e.index < grid.shape[1] else np.zeros(n, dtype=np.int64)
    if isinstance(e, S.BoolConst):
        return np.full(n, e.value)
    if isinstance(e, S.Unary):
        x = grid_eval(e.child, grid)
        return (~x) & M32 if e.op == "not" else (-x) & M32
    if isinstance(e, S.Binary):
        x, y = grid_eval(e.left, grid), grid_eval(e.right, grid)
        if e.op == "add":
            return (x + y) & M32
        if e.op == "sub":
            return (x - y) & M32
        if e.op == "mul":
            # split to stay inside int64
            lo = (x * (y & 0xFFFF)) & M32
            hi = ((x * (y >> 16)) & 0xFFFF) << 16
            return (lo + hi) & M32
        if e.op == "and":
            return x & y
        if e.op == "or":
            return x | y
        if e.op == "xor":
            return x ^ y
        if e.op == "shl":
            return (x << (y & 31)) & M32
        return x >> (y & 31)
    if isinstance(e, S.Cmp):
        x, y = grid_eval(e.left, grid), grid_eval(e.right, grid)
        return {
            "eq": lambda: x == y, "ne": lambda: x != y, "ult": lambda: x < y, "ule": lambda: x <= y,
            "slt": lambda: _signed(x) < _signed(y), "sle": lambda: _signed(x) <= _signed(y),
        }[e.op]()
    if isinstance(e, S.BoolOp):
        parts = [grid_eval(a, grid) for a in e.args]
        if e.op == "not":
            return ~parts[0]
        return np.logical_and.reduce(parts) if e.op == "and" else np.logical_or.reduce(parts)
    raise TypeError(e)


def grid_models(pi: S.PathConstraint, grid=GRID) -> np.ndarray:
    mask = np.ones(len(grid), dtype=bool)
    for c in pi.clauses:
        mask &= grid_eval(c, grid).astype(bool)
    return mask


def random_value_expr(rng: random.Random, depth: int, n_vars: int = 2):
    if depth <= 1 or rng.random() < 0.3:
        if rng.random() < 0.6:
            return S.SymByte(rng.randrange(n_vars))
        return S.Const(rng.choice([0, 1, 2, 3, 7, 15, 16, 100, 127, 128, 200, 255, 256, 1000,
                                   rng.randrange(512), 0xFFFFFFFF, 0x80000000]))
    if rng.random() < 0.15:
        return S.Unary(rng.choice(S.UNARY_OPS), random_value_expr(rng, depth - 1, n_vars))
    op = rng.choice(S.BINARY_OPS)
    right = random_value_expr(rng, depth - 1, n_vars)
    if op in ("shl", "shr") and rng.random() < 0.7:
        right = S.Const(rng.randrange(9))
    return S.Binary(op, random_value_expr(rng, depth - 1, n_vars), right)


def random_clause(rng: random.Random, depth: int = 3, n_vars: int = 2):
    r = rng.random()
    if r < 0.12:
        return S.BoolOp("not", (random_clause(rng, depth, n_vars),))
    if r < 0.24:
        return S.BoolOp(rng.choice(["and", "or"]),
                        tuple(random_clause(rng, depth - 1, n_vars) for _ in range(rng.randint(2, 3))))
    return S.Cmp(rng.choice(S.CMP_OPS), random_value_expr(rng, depth, n_vars), random_value_expr(rng, depth, n_vars))


def random_constraint(rng: random.Random, max_clauses: int = 3, n_vars: int = 2) -> S.PathConstraint:
    return S.PathConstraint(tuple(random_clause(rng, rng.randint(1, 3), n_vars)
                                  for _ in range(rng.randint(0, max_clauses))))


# ---------------------------------------------------------------------------
# random straight-line programs with a few forward branches

_BR_CMPS = ("eq", "ne", "lt", "le", "gt", "ge", "ult", "ule", "ugt", "uge")
_ARITH = ("ADD", "SUB", "MUL", "AND", "OR", "XOR", "SHL", "SHR")


def random_branch_program(rng: random.Random, n_branches: int, n_inputs: int = 2, concrete_branch: bool = True) -> str:
    """Sequential diamonds, forward jumps only, so every branch runs at most once."""
    out = [f".meta inputs {n_inputs}", "entry:"]
    out += [f"    INPUT r{i}" for i in range(n_inputs)]
    out.append("    CONST r4, 5")

    def arith():
        op = rng.choice(_ARITH)
        dst = rng.randrange(4)
        src = rng.randrange(4)
        operand = f"r{rng.randrange(4)}" if rng.random() < 0.4 else str(rng.randrange(8) if op in ("SHL", "SHR")
                                                                       else rng.randrange(256))
        return f"    {op} r{dst}, r{src}, {operand}"

    for i in range(n_branches):
        out += [arith() for _ in range(rng.randint(0, 2))]
        reg = rng.randrange(4)
        rhs = f"r{rng.randrange(4)}" if rng.random() < 0.25 else str(rng.randrange(256))
        out.append(f"    BR.{rng.choice(_BR_CMPS)} r{reg}, {rhs}, t{i}")
        out += [arith() for _ in range(rng.randint(0, 2))]
        out.append(f"    JMP j{i}")
        out.append(f"t{i}:")
        out += [arith() for _ in range(rng.randint(0, 2))]
        out.append(f"j{i}:")
    if concrete_branch:
        out.append("    BR.gt r4, 3, done")
        out.append("    CONST r5, 1")
    out.append("done:")
    out.append("    HALT")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# lockstep VM over many inputs (subset: no memory, no syscalls)


def _cmp_vec(cmp: str, a, b):
    if cmp.startswith("u"):
        x, y, c = a, b, cmp[1:]
    else:
        x, y, c = _signed(a), _signed(b), cmp
    return {"eq": x == y, "ne": x != y, "lt": x < y, "le": x <= y, "gt": x > y, "ge": x >= y}[c]


def lockstep_branch_codes(program: Program, inputs: np.ndarray, max_steps: int = 1000) -> np.ndarray:
    """Per input row, the vector of branch outcomes encoded as one integer.

    Static branch i contributes 3**i * (0 not reached, 1 not taken, 2 taken).
    Programs must branch forward only so each site runs at most once.
    """
    n = len(inputs)
    regs = np.zeros((8, n), dtype=np.int64)
    pc = np.full(n, program.entry, dtype=np.int64)
    cursor = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    code = np.zeros(n, dtype=np.int64)
    br_index = {loc: i for i, loc in enumerate(
        loc for loc, ins in enumerate(program.instructions) if ins.op is Opcode.BR)}
    width = inputs.shape[1]

    def val(arg, lanes):
        return regs[arg.index, lanes] if hasattr(arg, "index") else np.full(len(lanes), arg.value & M32)

    for _ in range(max_steps):
        if not alive.any():
            break
        for loc in np.unique(pc[alive]):
            lanes = np.flatnonzero(alive & (pc == loc))
            ins = program.instructions[loc]
            a = ins.args
            nxt = np.full(len(lanes), loc + 1)
            if ins.op is Opcode.CONST:
                regs[a[0].index, lanes] = a[1].value & M32
            elif ins.op is Opcode.MOV:
                regs[a[0].index, lanes] = regs[a[1].index, lanes]
            elif ins.op in BINARY_OPS:
                x, y = regs[a[1].index, lanes], val(a[2], lanes)
                name = ins.op.value.lower()
                if name == "mul":
                    r = ((x * (y & 0xFFFF)) + (((x * (y >> 16)) & 0xFFFF) << 16)) & M32
                else:
                    r = {"add": lambda: (x + y) & M32, "sub": lambda: (x - y) & M32, "and": lambda: x & y,
                         "or": lambda: x | y, "xor": lambda: x ^ y, "shl": lambda: (x << (y & 31)) & M32,
                         "shr": lambda: x >> (y & 31)}[name]()
                regs[a[0].index, lanes] = r
            elif ins.op is Opcode.NOT:
                regs[a[0].index, lanes] = (~regs[a[1].index, lanes]) & M32
            elif ins.op is Opcode.INPUT:
                c = cursor[lanes]
                v = np.zeros(len(lanes), dtype=np.int64)
                ok = c < width
                v[ok] = inputs[lanes[ok], c[ok]]
                regs[a[0].index, lanes] = v
                cursor[lanes] += 1
            elif ins.op is Opcode.JMP:
                nxt[:] = a[0].loc
            elif ins.op is Opcode.BR:
                taken = _cmp_vec(ins.cmp, regs[a[0].index, lanes], val(a[1], lanes))
                nxt = np.where(taken, a[2].loc, loc + 1)
                code[lanes] += 3 ** br_index[loc] * np.where(taken, 2, 1)
            elif ins.op is Opcode.HALT:
                alive[lanes] = False
                continue
            else:
                raise NotImplementedError(ins.op)
            pc[lanes] = nxt
            alive[lanes] &= nxt < len(program.instructions)
    return code


def trace_branch_code(program: Program, trace) -> int:
    br_index = {loc: i for i, loc in enumerate(
        loc for loc, ins in enumerate(program.instructions) if ins.op is Opcode.BR)}
    code = 0
    for e in trace.events:
        if e.kind is EventKind.BRANCH:
            code += 3 ** br_index[e.loc] * (2 if e.args[1] else 1)
    return code


# ---------------------------------------------------------------------------
# naive finite-trace LTL: direct recursion over positions


def naive_holds(trace, f, i: int = 0, env=None) -> bool:
    env = env or {}
    pos = L.positions(trace)
    n = len(pos)
    if i >= n:
        return False

    def h(g, j, e):
        if isinstance(g, L.Atom):
            return L.atom_holds(g, pos[j], e)
        if isinstance(g, L.Not):
            return not h(g.sub, j, e)
        if isinstance(g, L.And):
            return h(g.left, j, e) and h(g.right, j, e)
        if isinstance(g, L.Or):
            return h(g.left, j, e) or h(g.right, j, e)
        if isinstance(g, L.Implies):
            return (not h(g.left, j, e)) or h(g.right, j, e)
        if isinstance(g, L.Next):
            return j + 1 < n and h(g.sub, j + 1, e)
        if isinstance(g, L.Eventually):
            return any(h(g.sub, k, e) for k in range(j, n))
        if isinstance(g, L.Globally):
            return all(h(g.sub, k, e) for k in range(j, n))
        if isinstance(g, L.Until):
            return any(h(g.right, k, e) and all(h(g.left, m, e) for m in range(j, k)) for k in range(j, n))
        if isinstance(g, (L.Exists, L.Forall)):
            dom = L.value_domain(trace)
            vals = (h(g.body, j, {**e, g.var: v}) for v in dom)
            return any(vals) if isinstance(g, L.Exists) else all(vals)
        raise TypeError(g)

    return h(f, i, env)


_CLOSED_ATOMS = None


def random_formula(rng: random.Random, depth: int, bound: tuple[str, ...] = ()):
    global _CLOSED_ATOMS
    if _CLOSED_ATOMS is None:
        _CLOSED_ATOMS = L.atom_vocabulary() + [L.Atom("true"), L.Atom("false"), L.Atom("uid_eq", (1000,))]
    if depth <= 1:
        if bound and rng.random() < 0.3:
            v = L.Var(rng.choice(bound))
            return rng.choice([L.Atom("uid_eq", (v,)), L.Atom("send_to", (v,)), L.Atom("eq", (v, 3)),
                               L.Atom("ne", (v, 0))])
        return rng.choice(_CLOSED_ATOMS)
    k = rng.randrange(10)
    sub = lambda: random_formula(rng, depth - 1, bound)  # noqa: E731
    if k == 0:
        return L.Not(sub())
    if k == 1:
        return L.And(sub(), sub())
    if k == 2:
        return L.Or(sub(), sub())
    if k == 3:
        return L.Implies(sub(), sub())
    if k == 4:
        return L.Next(sub())
    if k == 5:
        return L.Eventually(sub())
    if k == 6:
        return L.Globally(sub())
    if k == 7:
        return L.Until(sub(), sub())
    name = f"v{len(bound)}"
    body = random_formula(rng, depth - 1, bound + (name,))
    return L.Exists(name, body) if k == 8 else L.Forall(name, body)


# ---------------------------------------------------------------------------
# naive DBSCAN: core graph components, borders to the lowest reaching cluster


def naive_dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    nb = d <= eps
    core = nb.sum(1) >= min_pts
    comp = [-1] * n
    label_of_comp: dict[int, int] = {}
    next_label = 0
    for i in range(n):  # components discovered by their smallest core index
        if not core[i] or comp[i] != -1:
            continue
        stack = [i]
        comp[i] = next_label
        while stack:
            j = stack.pop()
            for k in range(n):
                if nb[j, k] and core[k] and comp[k] == -1:
                    comp[k] = next_label
                    stack.append(k)
        label_of_comp[next_label] = next_label
        next_label += 1
    labels = np.full(n, -1)
    for i in range(n):
        if core[i]:
            labels[i] = comp[i]
        else:
            reach = [comp[k] for k in range(n) if core[k] and nb[i, k]]
            if reach:
                labels[i] = min(reach)
    return labels


REGS = [f"r{i}" for i in range(8)]


def random_program_text(rng: random.Random, n: int = 20) -> str:
    labels = [f"L{i}" for i in range(4)]
    lines = ["entry:"]
    positions = sorted(rng.sample(range(1, n), len(labels)))
    for i in range(n):
        if positions and i == positions[0]:
            lines.append(f"{labels[len(labels) - len(positions)]}:")
            positions.pop(0)
        r = rng.randrange(12)
        a, b, c = rng.choice(REGS), rng.choice(REGS), rng.choice(REGS)
        if r == 0:
            lines.append(f"    CONST {a}, {rng.randrange(-1000, 1000)}")
        elif r == 1:
            lines.append(f"    {rng.choice(['ADD', 'SUB', 'MUL', 'AND', 'OR', 'XOR', 'SHL', 'SHR'])} {a}, {b}, "
                         f"{c if rng.random() < 0.5 else rng.randrange(100)}")
        elif r == 2:
            lines.append(f"    NOT {a}, {b}")
        elif r == 3:
            lines.append(f"    MOV {a}, {b}")
        elif r == 4:
            lines.append(f"    INPUT {a}")
        elif r == 5:
            lines.append(f"    BR.{rng.choice(['eq', 'ne', 'lt', 'ult', 'ge', 'uge'])} {a}, {rng.randrange(10)}, "
                         f"{rng.choice(labels)}")
        elif r == 6:
            lines.append(f"    JMP {rng.choice(labels)}")
        elif r == 7:
            lines.append(f"    LOAD {a}, {b}, {rng.randrange(64)}")
        elif r == 8:
            lines.append(f"    STORE {a}, {rng.randrange(64)}, {b}")
        elif r == 9:
            lines.append(rng.choice([
                "    SYSCALL READ_FILE, SENSITIVE_DOC", f"    SYSCALL SEND, {a}, {b}", "    SYSCALL WRITE_FILE, CRON",
                "    SYSCALL MPROTECT, TEXT_SECTION, RWX", f"    SYSCALL SETUID, {rng.choice([0, 1000, a])}",
                f"    SYSCALL GETUID, {a}", f"    SYSCALL TIME, {a}", "    SYSCALL EXEC, TMP",
                f"    SYSCALL SOCKET, {a}",
            ]))
        else:
            lines.append("    HALT")
    lines.append("    HALT")
    return "\n".join(lines) + "\n"


_QUIET_CALLS = (" SYSCALL READ_FILE, TMP", " SYSCALL WRITE_FILE, LOG", " SYSCALL TIME, r0", " SYSCALL GETUID, r1",
                " SYSCALL MPROTECT, DATA, RW")


def separable_fixture(n: int = 200, max_len: int = 32, seed: int = 0):
    """Token batch where the label is exactly 'the trace contains a SEND'."""
    from tracehunt import classifier as C
    from tracehunt import features as F
    from tracehunt.solver import PathConstraint
    from tracehunt.vm import parse_program, run_concrete

    rng = random.Random(seed)
    toks, labels = [], []
    for i in range(n):
        calls = [rng.choice(_QUIET_CALLS) for _ in range(rng.randint(1, 5))]
        if i % 2:
            calls.insert(rng.randint(0, len(calls)), " SYSCALL SEND, 1")
        p = parse_program("entry:\n" + "\n".join(calls) + "\n HALT\n")
        t = run_concrete(p)
        toks.append(C.tokenize(F.extract(PathConstraint(), t, p), t, max_len))
        labels.append(i % 2)
    return np.array(toks), np.array(labels, dtype=float)


SNIPPETS = [
    " SYSCALL READ_FILE, SENSITIVE_DOC", " SYSCALL SOCKET, r1", " SYSCALL SEND, r1, 3", " SYSCALL SEND, 0, 0",
    " SYSCALL WRITE_FILE, CRON", " SYSCALL WRITE_FILE, LOG", " SYSCALL MPROTECT, TEXT_SECTION, RWX",
    " SYSCALL MPROTECT, DATA, RW", " SYSCALL SETUID, 0", " SYSCALL SETUID, 1000", " SYSCALL GETUID, r2",
    " SYSCALL EXEC, TMP", " SYSCALL TIME, r3", " CONST r4, 4096\n STORE r4, 1, r0",
    " CONST r4, 8192\n STORE r4, 1, r0", " BR.eq r0, 0, next{i}\nnext{i}:",
]


def random_trace(rng: random.Random, max_events: int = 20):
    body = "\n".join(rng.choice(SNIPPETS).format(i=i) for i in range(rng.randint(0, max_events // 2)))
    p = parse_program("entry:\n" + (body or " CONST r0, 0") + "\n HALT\n")
    t = run_concrete(p, uid=rng.choice([0, 1000]))
    assert len(t.events) <= max_events
    return t


def trace_of(body: str, data: bytes = b"", uid: int = 1000):
    return run_concrete(parse_program("entry:\n" + body + "\n HALT\n"), data, uid=uid)


# positive and negative fixture per builtin, mapped onto VM events
FIXTURES = {
    "exfil": (
        " SYSCALL READ_FILE, SENSITIVE_DOC\n SYSCALL SOCKET, r1\n SYSCALL SEND, r1, 0",
        " SYSCALL SOCKET, r1\n SYSCALL SEND, r1, 0\n SYSCALL READ_FILE, SENSITIVE_DOC",  # send before the read
    ),
    "privesc": (
        " SYSCALL GETUID, r0\n SYSCALL SETUID, 0",
        " SYSCALL SETUID, 1001\n SYSCALL SETUID, 1002",
    ),
    "persist": (
        " SYSCALL WRITE_FILE, CRON",
        " SYSCALL WRITE_FILE, LOG\n SYSCALL READ_FILE, CRON",
    ),
    "poly": (
        " SYSCALL MPROTECT, TEXT_SECTION, RWX\n CONST r1, 4100\n STORE r1, 0, r0",
        " CONST r1, 4100\n STORE r1, 0, r0\n SYSCALL MPROTECT, TEXT_SECTION, RWX",  # write precedes mprotect
    ),
}
