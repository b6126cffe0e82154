"""Quantifier-free constraints over symbolic input bytes.

Expressions are 32-bit words built from constants and symbolic input bytes
(zero-extended).  A :class:`PathConstraint` is a conjunction of boolean
clauses.  :func:`check_sat` decides satisfiability by backtracking over byte
assignments with node consistency, interval pruning and forward checking;
because every variable ranges over 0..255 the search is complete, so UNSAT
is decisive and UNKNOWN only means the budget ran out.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

MASK32 = 0xFFFFFFFF
MAX_INPUT_SIZE = 4096
DEFAULT_TIMEOUT = 30.0
DEFAULT_MAX_NODES = 2_000_000
GRID_LIMIT = 1 << 16


class SortError(TypeError):
    """An ill-sorted expression (boolean where a word is expected or vice versa)."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True, slots=True)
class Const:
    value: int

    def __post_init__(self):
        object.__setattr__(self, "value", self.value & MASK32)


@dataclass(frozen=True, slots=True)
class SymByte:
    index: int


@dataclass(frozen=True, slots=True)
class Unary:
    op: str  # "not" | "neg"
    child: "Expr"


@dataclass(frozen=True, slots=True)
class Binary:
    op: str  # add sub mul and or xor shl shr
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class Cmp:
    op: str  # eq ne slt sle ult ule
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class BoolOp:
    op: str  # and | or | not
    args: tuple["Expr", ...]


@dataclass(frozen=True, slots=True)
class BoolConst:
    value: bool


Expr = Union[Const, SymByte, Unary, Binary, Cmp, BoolOp, BoolConst]

TRUE = BoolConst(True)
FALSE = BoolConst(False)

UNARY_OPS = ("not", "neg")
BINARY_OPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "shr")
CMP_OPS = ("eq", "ne", "slt", "sle", "ult", "ule")
BOOL_OPS = ("and", "or", "not")
BITWISE_OPS = frozenset({"and", "or", "xor", "shl", "shr"})

_SMT_UNARY = {"not": "bvnot", "neg": "bvneg"}
_SMT_BINARY = {"add": "bvadd", "sub": "bvsub", "mul": "bvmul", "and": "bvand", "or": "bvor",
               "xor": "bvxor", "shl": "bvshl", "shr": "bvlshr"}
_SMT_CMP = {"eq": "=", "ne": "distinct", "slt": "bvslt", "sle": "bvsle", "ult": "bvult", "ule": "bvule"}


def is_bool(e: Expr) -> bool:
    return isinstance(e, (Cmp, BoolOp, BoolConst))


def sort_of(e: Expr, max_input: int = MAX_INPUT_SIZE) -> str:
    """Return ``"bv"`` or ``"bool"``; raise :class:`SortError` if ill-sorted."""
    if isinstance(e, Const):
        return "bv"
    if isinstance(e, SymByte):
        if not 0 <= e.index < max_input:
            raise SortError(f"symbolic byte index {e.index} out of range")
        return "bv"
    if isinstance(e, BoolConst):
        return "bool"
    if isinstance(e, Unary):
        if e.op not in UNARY_OPS or sort_of(e.child, max_input) != "bv":
            raise SortError(f"bad unary node {e!r}")
        return "bv"
    if isinstance(e, Binary):
        if e.op not in BINARY_OPS or sort_of(e.left, max_input) != "bv" or sort_of(e.right, max_input) != "bv":
            raise SortError(f"bad binary node {e.op}")
        return "bv"
    if isinstance(e, Cmp):
        if e.op not in CMP_OPS or sort_of(e.left, max_input) != "bv" or sort_of(e.right, max_input) != "bv":
            raise SortError(f"bad comparison {e.op}")
        return "bool"
    if isinstance(e, BoolOp):
        if e.op not in BOOL_OPS or (e.op == "not" and len(e.args) != 1):
            raise SortError(f"bad boolean node {e.op}")
        for a in e.args:
            if sort_of(a, max_input) != "bool":
                raise SortError(f"non-boolean operand under {e.op}")
        return "bool"
    raise SortError(f"not an expression: {e!r}")


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Unary):
        return (e.child,)
    if isinstance(e, (Binary, Cmp)):
        return (e.left, e.right)
    if isinstance(e, BoolOp):
        return e.args
    return ()


def iter_nodes(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def depth(e: Expr) -> int:
    """Node depth; a leaf has depth 1."""
    kids = children(e)
    return 1 + (max(depth(k) for k in kids) if kids else 0)


def vars_of(e: Expr) -> frozenset[int]:
    return frozenset(n.index for n in iter_nodes(e) if isinstance(n, SymByte))


# ---------------------------------------------------------------------------
# evaluation


def _signed(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def eval_expr(e: Expr, model: "Model | dict[int, int] | None" = None) -> int | bool:
    """Concrete value under ``model`` (missing bytes read as zero)."""
    assignment = model.assignment if isinstance(model, Model) else (model or {})
    return _eval(e, assignment)


def _eval(e: Expr, a: dict[int, int]) -> int | bool:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, SymByte):
        return a.get(e.index, 0) & 0xFF
    if isinstance(e, Binary):
        x, y = _eval(e.left, a), _eval(e.right, a)
        op = e.op
        if op == "add":
            return (x + y) & MASK32
        if op == "sub":
            return (x - y) & MASK32
        if op == "mul":
            return (x * y) & MASK32
        if op == "and":
            return x & y
        if op == "or":
            return x | y
        if op == "xor":
            return x ^ y
        if op == "shl":
            return (x << (y & 31)) & MASK32
        return x >> (y & 31)
    if isinstance(e, Cmp):
        x, y = _eval(e.left, a), _eval(e.right, a)
        op = e.op
        if op == "eq":
            return x == y
        if op == "ne":
            return x != y
        if op == "ult":
            return x < y
        if op == "ule":
            return x <= y
        if op == "slt":
            return _signed(x) < _signed(y)
        return _signed(x) <= _signed(y)
    if isinstance(e, BoolOp):
        if e.op == "and":
            return all(_eval(c, a) for c in e.args)
        if e.op == "or":
            return any(_eval(c, a) for c in e.args)
        return not _eval(e.args[0], a)
    if isinstance(e, Unary):
        x = _eval(e.child, a)
        return (~x & MASK32) if e.op == "not" else (-x & MASK32)
    if isinstance(e, BoolConst):
        return e.value
    raise SortError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# construction helpers and simplification


def mk_not(c: Expr) -> Expr:
    """Boolean negation with double-negation elimination."""
    if isinstance(c, BoolConst):
        return BoolConst(not c.value)
    if isinstance(c, BoolOp) and c.op == "not":
        return c.args[0]
    return BoolOp("not", (c,))


def mk_and(*args: Expr) -> Expr:
    if not args:
        return TRUE
    if len(args) == 1:
        return args[0]
    return BoolOp("and", tuple(args))


def mk_or(*args: Expr) -> Expr:
    if not args:
        return FALSE
    if len(args) == 1:
        return args[0]
    return BoolOp("or", tuple(args))


def simplify(e: Expr) -> Expr:
    """Constant folding and double-negation elimination, nothing more."""
    if isinstance(e, (Const, SymByte, BoolConst)):
        return e
    if isinstance(e, Unary):
        c = simplify(e.child)
        if isinstance(c, Const):
            return Const(_eval(Unary(e.op, c), {}))
        if isinstance(c, Unary) and c.op == e.op:
            return c.child
        return Unary(e.op, c)
    if isinstance(e, (Binary, Cmp)):
        l, r = simplify(e.left), simplify(e.right)
        node = type(e)(e.op, l, r)
        if isinstance(l, Const) and isinstance(r, Const):
            v = _eval(node, {})
            return BoolConst(v) if isinstance(node, Cmp) else Const(v)
        return node
    if isinstance(e, BoolOp):
        args = tuple(simplify(a) for a in e.args)
        if e.op == "not":
            return mk_not(args[0])
        unit = e.op == "and"
        kept = []
        for a in args:
            if isinstance(a, BoolConst):
                if a.value != unit:
                    return BoolConst(not unit)
                continue
            kept.append(a)
        return mk_and(*kept) if unit else mk_or(*kept)
    raise SortError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# canonical text form


def to_text(e: Expr) -> str:
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, SymByte):
        return f"b{e.index}"
    if isinstance(e, BoolConst):
        return "true" if e.value else "false"
    if isinstance(e, Unary):
        return f"({_SMT_UNARY[e.op]} {to_text(e.child)})"
    if isinstance(e, Binary):
        return f"({_SMT_BINARY[e.op]} {to_text(e.left)} {to_text(e.right)})"
    if isinstance(e, Cmp):
        return f"({_SMT_CMP[e.op]} {to_text(e.left)} {to_text(e.right)})"
    if isinstance(e, BoolOp):
        return "(" + " ".join([e.op] + [to_text(a) for a in e.args]) + ")"
    raise SortError(f"not an expression: {e!r}")


_FROM_UNARY = {v: k for k, v in _SMT_UNARY.items()}
_FROM_BINARY = {v: k for k, v in _SMT_BINARY.items()}
_FROM_CMP = {v: k for k, v in _SMT_CMP.items()}


def parse_expr(text: str) -> Expr:
    """Inverse of :func:`to_text`."""
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            head = tokens[pos]
            pos += 1
            args = []
            while tokens[pos] != ")":
                args.append(parse())
            pos += 1
            if head in _FROM_UNARY:
                return Unary(_FROM_UNARY[head], *args)
            if head in _FROM_BINARY:
                return Binary(_FROM_BINARY[head], *args)
            if head in _FROM_CMP:
                return Cmp(_FROM_CMP[head], *args)
            if head in BOOL_OPS:
                return BoolOp(head, tuple(args))
            raise ValueError(f"unknown operator {head!r}")
        if tok == "true":
            return TRUE
        if tok == "false":
            return FALSE
        if tok.startswith("b") and tok[1:].isdigit():
            return SymByte(int(tok[1:]))
        if tok.isdigit():
            return Const(int(tok))
        raise ValueError(f"unexpected token {tok!r}")

    e = parse()
    if pos != len(tokens):
        raise ValueError("trailing tokens in expression")
    return e


# ---------------------------------------------------------------------------
# path constraints and models


@dataclass(frozen=True)
class BranchSite:
    loc: int
    taken: bool

    def flipped(self) -> "BranchSite":
        return BranchSite(self.loc, not self.taken)


@dataclass(frozen=True)
class PathConstraint:
    """Conjunction of boolean clauses in branch-encounter order; empty is true."""

    clauses: tuple[Expr, ...] = ()
    sites: tuple[BranchSite | None, ...] = ()

    def __post_init__(self):
        if not self.sites and self.clauses:
            object.__setattr__(self, "sites", (None,) * len(self.clauses))
        if len(self.sites) != len(self.clauses):
            raise ValueError("one provenance entry per clause")

    def __len__(self) -> int:
        return len(self.clauses)

    @property
    def is_top(self) -> bool:
        return not self.clauses

    def conjoin(self, clause: Expr, site: BranchSite | None = None) -> "PathConstraint":
        return PathConstraint(self.clauses + (clause,), self.sites + (site,))

    def prefix(self, k: int) -> "PathConstraint":
        return PathConstraint(self.clauses[:k], self.sites[:k])

    def as_expr(self) -> Expr:
        return mk_and(*self.clauses)

    def text(self) -> str:
        if not self.clauses:
            return "true"
        if len(self.clauses) == 1:
            return to_text(self.clauses[0])
        return "(and " + " ".join(to_text(c) for c in self.clauses) + ")"

    def clause_texts(self) -> list[str]:
        return [to_text(c) for c in self.clauses]

    def variables(self) -> frozenset[int]:
        out: frozenset[int] = frozenset()
        for c in self.clauses:
            out |= vars_of(c)
        return out

    def to_json(self) -> dict:
        return {
            "clauses": self.clause_texts(),
            "sites": [None if s is None else [s.loc, int(s.taken)] for s in self.sites],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PathConstraint":
        sites = tuple(None if s is None else BranchSite(s[0], bool(s[1])) for s in d.get("sites", []))
        return cls(tuple(parse_expr(t) for t in d["clauses"]), sites)

    @classmethod
    def of(cls, *clauses: Expr) -> "PathConstraint":
        return cls(tuple(clauses))


@dataclass(frozen=True)
class Model:
    assignment: dict[int, int] = field(default_factory=dict)

    def get(self, index: int) -> int:
        return self.assignment.get(index, 0)

    def to_bytes(self, n: int) -> bytes:
        return bytes(self.get(i) for i in range(n))

    def satisfies(self, pi: PathConstraint) -> bool:
        return all(_eval(c, self.assignment) for c in pi.clauses)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.assignment.items())))


class Status(enum.Enum):
    SAT = "SAT"
    UNSAT = "UNSAT"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class SatResult:
    status: Status
    model: Model | None = None
    nodes: int = 0
    elapsed: float = 0.0

    @property
    def sat(self) -> bool:
        return self.status is Status.SAT


@dataclass
class Budget:
    """Per-query limit; ``timeout`` mirrors a 30 s SMT timeout by default."""

    timeout: float = DEFAULT_TIMEOUT
    max_nodes: int = DEFAULT_MAX_NODES


class _OutOfBudget(Exception):
    pass


# ---------------------------------------------------------------------------
# interval reasoning (unsigned 32-bit)

_FULL = (0, MASK32)


def _interval(e: Expr, bounds: dict[int, tuple[int, int]]) -> tuple[int, int]:
    if isinstance(e, Const):
        return (e.value, e.value)
    if isinstance(e, SymByte):
        return bounds.get(e.index, (0, 0))
    if isinstance(e, Unary):
        lo, hi = _interval(e.child, bounds)
        if lo == hi:
            v = _eval(Unary(e.op, Const(lo)), {})
            return (v, v)
        if e.op == "not":
            return (~hi & MASK32, ~lo & MASK32)
        return _FULL
    if isinstance(e, Binary):
        a, b = _interval(e.left, bounds), _interval(e.right, bounds)
        op = e.op
        if op == "add":
            return (a[0] + b[0], a[1] + b[1]) if a[1] + b[1] <= MASK32 else _FULL
        if op == "sub":
            return (a[0] - b[1], a[1] - b[0]) if a[0] >= b[1] else _FULL
        if op == "mul":
            return (a[0] * b[0], a[1] * b[1]) if a[1] * b[1] <= MASK32 else _FULL
        if op == "and":
            if a[0] == a[1] and b[0] == b[1]:
                v = a[0] & b[0]
                return (v, v)
            return (0, min(a[1], b[1]))
        if op in ("or", "xor"):
            top = (1 << max(a[1], b[1]).bit_length()) - 1
            if op == "or":
                return (max(a[0], b[0]), top)
            return (0, top)
        if b[0] == b[1]:
            s = b[0] & 31
            if op == "shl":
                return (a[0] << s, a[1] << s) if (a[1] << s) <= MASK32 else _FULL
            return (a[0] >> s, a[1] >> s)
        if op == "shr":
            return (0, a[1])
        return _FULL
    raise SortError("interval of a boolean node")


def _truth(e: Expr, bounds: dict[int, tuple[int, int]]) -> bool | None:
    """Three-valued truth of a boolean expression over interval bounds."""
    if isinstance(e, BoolConst):
        return e.value
    if isinstance(e, Cmp):
        a, b = _interval(e.left, bounds), _interval(e.right, bounds)
        op = e.op
        if op in ("slt", "sle"):
            # both within the non-negative half: signed order == unsigned order
            if a[1] > 0x7FFFFFFF or b[1] > 0x7FFFFFFF:
                return None
            op = "ult" if op == "slt" else "ule"
        if op == "ult":
            if a[1] < b[0]:
                return True
            if a[0] >= b[1]:
                return False
            return None
        if op == "ule":
            if a[1] <= b[0]:
                return True
            if a[0] > b[1]:
                return False
            return None
        disjoint = a[1] < b[0] or b[1] < a[0]
        same_point = a[0] == a[1] == b[0] == b[1]
        if op == "eq":
            return False if disjoint else (True if same_point else None)
        return True if disjoint else (False if same_point else None)
    if isinstance(e, BoolOp):
        vals = [_truth(a, bounds) for a in e.args]
        if e.op == "not":
            return None if vals[0] is None else not vals[0]
        if e.op == "and":
            if any(v is False for v in vals):
                return False
            return True if all(v is True for v in vals) else None
        if any(v is True for v in vals):
            return True
        return False if all(v is False for v in vals) else None
    raise SortError("truth of a word-valued node")


# ---------------------------------------------------------------------------
# compiled clauses


_POSTFIX_UNARY = {"not": kernels.OP_NOT, "neg": kernels.OP_NEG}
_POSTFIX_BINARY = {"add": kernels.OP_ADD, "sub": kernels.OP_SUB, "mul": kernels.OP_MUL, "and": kernels.OP_AND,
                   "or": kernels.OP_OR, "xor": kernels.OP_XOR, "shl": kernels.OP_SHL, "shr": kernels.OP_SHR}
_POSTFIX_CMP = {"eq": kernels.OP_EQ, "ne": kernels.OP_NE, "slt": kernels.OP_SLT, "sle": kernels.OP_SLE,
                "ult": kernels.OP_ULT, "ule": kernels.OP_ULE}


def compile_postfix(e: Expr, columns: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten ``e`` into (opcodes, args) for :func:`kernels.eval_postfix`."""
    ops: list[int] = []
    args: list[int] = []

    def emit(n: Expr) -> None:
        if isinstance(n, Const):
            ops.append(kernels.OP_CONST); args.append(n.value)
        elif isinstance(n, BoolConst):
            ops.append(kernels.OP_CONST); args.append(int(n.value))
        elif isinstance(n, SymByte):
            ops.append(kernels.OP_VAR); args.append(columns[n.index])
        elif isinstance(n, Unary):
            emit(n.child)
            ops.append(_POSTFIX_UNARY[n.op]); args.append(0)
        elif isinstance(n, Binary):
            emit(n.left); emit(n.right)
            ops.append(_POSTFIX_BINARY[n.op]); args.append(0)
        elif isinstance(n, Cmp):
            emit(n.left); emit(n.right)
            ops.append(_POSTFIX_CMP[n.op]); args.append(0)
        elif n.op == "not":
            emit(n.args[0])
            ops.append(kernels.OP_LNOT); args.append(0)
        else:
            if not n.args:
                ops.append(kernels.OP_CONST); args.append(int(n.op == "and"))
                return
            emit(n.args[0])
            code = kernels.OP_LAND if n.op == "and" else kernels.OP_LOR
            for a in n.args[1:]:
                emit(a)
                ops.append(code); args.append(0)

    emit(e)
    return np.asarray(ops, dtype=np.int64), np.asarray(args, dtype=np.int64)


@dataclass
class _Clause:
    expr: Expr
    vars: frozenset[int]
    ops: np.ndarray
    args: np.ndarray


class _Search:
    def __init__(self, clauses: list[Expr], budget: Budget):
        self.budget = budget
        self.deadline = time.monotonic() + budget.timeout
        self.nodes = 0
        self.vars = sorted(set().union(*(vars_of(c) for c in clauses)))
        self.col = {v: j for j, v in enumerate(self.vars)}
        self.clauses = []
        for c in clauses:
            ops, args = compile_postfix(c, self.col)
            self.clauses.append(_Clause(c, vars_of(c), ops, args))
        self.by_var: dict[int, list[_Clause]] = {v: [] for v in self.vars}
        for cl in self.clauses:
            for v in cl.vars:
                self.by_var[v].append(cl)

    def tick(self, work: int = 1) -> None:
        self.nodes += work
        if self.nodes > self.budget.max_nodes or time.monotonic() > self.deadline:
            raise _OutOfBudget

    def _eval_rows(self, cl: _Clause, rows: np.ndarray) -> np.ndarray:
        self.tick(1 + rows.shape[0] // 256)
        return kernels.eval_postfix(cl.ops, cl.args, rows) != 0

    def _rows_for(self, assign: dict[int, int], var: int | None, values: np.ndarray) -> np.ndarray:
        rows = np.zeros((len(values) if var is not None else 1, len(self.vars)), dtype=np.uint64)
        for v, x in assign.items():
            rows[:, self.col[v]] = x
        if var is not None:
            rows[:, self.col[var]] = values
        return rows

    def run(self) -> dict[int, int] | None:
        domains = {v: np.arange(256, dtype=np.uint64) for v in self.vars}
        # node consistency on single-variable clauses
        for cl in self.clauses:
            if len(cl.vars) == 1:
                (v,) = cl.vars
                keep = self._eval_rows(cl, self._rows_for({}, v, domains[v]))
                domains[v] = domains[v][keep]
                if domains[v].size == 0:
                    return None
        live = [cl for cl in self.clauses if len(cl.vars) > 1]
        bounds = {v: (int(d[0]), int(d[-1])) for v, d in domains.items()}
        pending = []
        for cl in live:
            t = _truth(cl.expr, bounds)
            if t is False:
                return None
            if t is None:
                pending.append(cl)
        self.live = set(id(cl) for cl in pending)
        return self._search({}, domains)

    def _relevant(self, v: int) -> Iterable[_Clause]:
        return (cl for cl in self.by_var[v] if id(cl) in self.live)

    def _search(self, assign: dict[int, int], domains: dict[int, np.ndarray]) -> dict[int, int] | None:
        self.tick()
        free = [v for v in self.vars if v not in assign]
        if not free:
            return dict(assign)
        sizes = [domains[v].size for v in free]
        if len(free) <= 2 and math.prod(sizes) <= GRID_LIMIT:
            return self._grid(assign, free, domains)
        var = min(free, key=lambda v: (domains[v].size, v))
        for value in domains[var].tolist():
            self.tick()
            trial = {**assign, var: value}
            narrowed = self._forward_check(trial, var, domains)
            if narrowed is None:
                continue
            found = self._search(trial, narrowed)
            if found is not None:
                return found
        return None

    def _forward_check(self, assign: dict[int, int], var: int, domains: dict[int, np.ndarray]):
        out = dict(domains)
        out[var] = np.asarray([assign[var]], dtype=np.uint64)
        for cl in self._relevant(var):
            rest = [v for v in cl.vars if v not in assign]
            if not rest:
                if not self._eval_rows(cl, self._rows_for(assign, None, None))[0]:
                    return None
            elif len(rest) == 1:
                (y,) = rest
                keep = self._eval_rows(cl, self._rows_for(assign, y, out[y]))
                out[y] = out[y][keep]
                if out[y].size == 0:
                    return None
            else:
                bounds = {v: (int(d[0]), int(d[-1])) for v, d in out.items()}
                if _truth(cl.expr, bounds) is False:
                    return None
        return out

    def _grid(self, assign: dict[int, int], free: list[int], domains: dict[int, np.ndarray]) -> dict[int, int] | None:
        grids = np.meshgrid(*[domains[v] for v in free], indexing="ij")
        n = grids[0].size
        rows = np.zeros((n, len(self.vars)), dtype=np.uint64)
        for v, x in assign.items():
            rows[:, self.col[v]] = x
        for v, g in zip(free, grids):
            rows[:, self.col[v]] = g.ravel()
        ok = np.ones(n, dtype=bool)
        seen = set()
        for v in free:
            for cl in self._relevant(v):
                if id(cl) in seen:
                    continue
                seen.add(id(cl))
                ok &= self._eval_rows(cl, rows)
                if not ok.any():
                    return None
        hit = int(np.argmax(ok))
        if not ok[hit]:
            return None
        out = dict(assign)
        for v in free:
            out[v] = int(rows[hit, self.col[v]])
        return out


def _prepare(pi: PathConstraint) -> list[Expr] | None:
    """Simplified, deduplicated clauses; ``None`` if some clause folds to false."""
    seen: set[Expr] = set()
    out = []
    for c in pi.clauses:
        s = simplify(c)
        if isinstance(s, BoolConst):
            if not s.value:
                return None
            continue
        if s in seen:
            continue
        seen.add(s)
        out.append(s)
    return out


def check_sat(pi: PathConstraint, budget: Budget | None = None) -> SatResult:
    """Decide ``pi``; a SAT model is verified with :func:`eval_expr` before return."""
    for c in pi.clauses:
        if sort_of(c) != "bool":
            raise SortError("path constraint clause is not boolean")
    budget = budget or Budget()
    t0 = time.perf_counter()
    clauses = _prepare(pi)
    if clauses is None:
        return SatResult(Status.UNSAT, elapsed=time.perf_counter() - t0)
    if not clauses:
        return SatResult(Status.SAT, Model({}), elapsed=time.perf_counter() - t0)
    search = _Search(clauses, budget)
    try:
        found = search.run()
    except _OutOfBudget:
        log.warning("solver budget exhausted after %d nodes", search.nodes)
        return SatResult(Status.UNKNOWN, nodes=search.nodes, elapsed=time.perf_counter() - t0)
    elapsed = time.perf_counter() - t0
    if found is None:
        return SatResult(Status.UNSAT, nodes=search.nodes, elapsed=elapsed)
    model = Model({k: found.get(k, 0) for k in search.vars})
    if not model.satisfies(pi):
        raise AssertionError(f"solver produced a bad model for {pi.text()}")
    return SatResult(Status.SAT, model, nodes=search.nodes, elapsed=elapsed)


def negate_branch(pi: PathConstraint, j: int) -> PathConstraint:
    """Keep clauses 1..j-1, negate clause j (1-based), drop the rest."""
    if not 1 <= j <= len(pi):
        raise IndexError(f"clause index {j} outside 1..{len(pi)}")
    site = pi.sites[j - 1]
    return PathConstraint(
        pi.clauses[: j - 1] + (mk_not(pi.clauses[j - 1]),),
        pi.sites[: j - 1] + (None if site is None else site.flipped(),),
    )


def entails(pi_strong: PathConstraint, pi_weak: PathConstraint, budget: Budget | None = None) -> bool | None:
    """True iff every model of ``pi_strong`` satisfies ``pi_weak``; None if undecided."""
    if pi_weak.is_top:
        return True
    negated = mk_or(*(mk_not(c) for c in pi_weak.clauses))
    res = check_sat(pi_strong.conjoin(negated), budget)
    if res.status is Status.UNKNOWN:
        return None
    return res.status is Status.UNSAT
