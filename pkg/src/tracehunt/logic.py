"""Finite-trace temporal logic over VM traces.

Surface syntax (precedence from tightest): unary operators ``! X F G`` and
quantifiers ``exists v.`` / ``forall v.``, then ``U`` (right associative),
``&&``, ``||``, ``->`` (right associative).  Atoms::

    true  false
    send  exec  time  socket  getuid  setuid  read_file  write_file  mprotect
    send(t)                     SEND on socket t
    reads_sensitive  reads(PATH)  writes_to(PATH)
    mprotect(FLAGS)             e.g. mprotect(RWX): requested perms include FLAGS
    writes_region(REGION)       a memory write landing in REGION
    uid == t   uid != t   t == t   t != t

where ``t`` is an integer or a quantified variable.

A trace is evaluated over positions ``[initial state] + [one per event]``;
each position carries the uid after that step.  ``X`` is a strong next (false
at the last position).  Quantifiers range over the integers that occur in the
trace (event arguments and uids).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Union

from .vm import (
    PATH_IDS, PERM_BITS, REGION_NAMES, EventKind, SyscallKind, Trace, TraceEvent, perm_name, region_of,
)


class FormulaError(ValueError):
    def __init__(self, message: str, pos: int | None = None):
        self.pos = pos
        super().__init__(f"{message} (at offset {pos})" if pos is not None else message)


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


Term = Union[int, Var]


@dataclass(frozen=True)
class Atom:
    pred: str
    args: tuple = ()


@dataclass(frozen=True)
class Not:
    sub: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Next:
    sub: "Formula"


@dataclass(frozen=True)
class Eventually:
    sub: "Formula"


@dataclass(frozen=True)
class Globally:
    sub: "Formula"


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Exists:
    var: str
    body: "Formula"


@dataclass(frozen=True)
class Forall:
    var: str
    body: "Formula"


Formula = Union[Atom, Not, And, Or, Implies, Next, Eventually, Globally, Until, Exists, Forall]

SYSCALL_ATOMS = {k.value.lower(): k for k in SyscallKind}
_SYM_ATOMS = {"reads": "path", "writes_to": "path", "mprotect": "perm", "writes_region": "region"}
KEYWORDS = {"F", "G", "X", "U", "exists", "forall", "true", "false", "uid"}


def free_vars(f: Formula) -> frozenset[str]:
    if isinstance(f, Atom):
        return frozenset(a.name for a in f.args if isinstance(a, Var))
    if isinstance(f, (Exists, Forall)):
        return free_vars(f.body) - {f.var}
    if isinstance(f, (Not, Next, Eventually, Globally)):
        return free_vars(f.sub)
    return free_vars(f.left) | free_vars(f.right)


def formula_depth(f: Formula) -> int:
    if isinstance(f, Atom):
        return 1
    if isinstance(f, (Exists, Forall)):
        return 1 + formula_depth(f.body)
    if isinstance(f, (Not, Next, Eventually, Globally)):
        return 1 + formula_depth(f.sub)
    return 1 + max(formula_depth(f.left), formula_depth(f.right))


# ---------------------------------------------------------------------------
# printing


def _term_str(t: Term) -> str:
    return str(t)


def atom_str(a: Atom) -> str:
    p = a.pred
    if p in ("true", "false", "reads_sensitive"):
        return p
    if p == "syscall":
        return a.args[0].value.lower()
    if p == "send_to":
        return f"send({_term_str(a.args[0])})"
    if p in _SYM_ATOMS:
        return f"{p}({a.args[0]})"
    if p == "uid_eq":
        return f"uid == {_term_str(a.args[0])}"
    if p == "uid_ne":
        return f"uid != {_term_str(a.args[0])}"
    if p == "eq":
        return f"{_term_str(a.args[0])} == {_term_str(a.args[1])}"
    if p == "ne":
        return f"{_term_str(a.args[0])} != {_term_str(a.args[1])}"
    raise FormulaError(f"unknown atom {p!r}")


def to_text(f: Formula) -> str:
    """Fully parenthesised surface syntax; ``parse_formula`` inverts it."""
    if isinstance(f, Atom):
        return atom_str(f)
    if isinstance(f, Not):
        return f"!({to_text(f.sub)})"
    if isinstance(f, Next):
        return f"X({to_text(f.sub)})"
    if isinstance(f, Eventually):
        return f"F({to_text(f.sub)})"
    if isinstance(f, Globally):
        return f"G({to_text(f.sub)})"
    if isinstance(f, Exists):
        return f"exists {f.var}. ({to_text(f.body)})"
    if isinstance(f, Forall):
        return f"forall {f.var}. ({to_text(f.body)})"
    sym = {And: "&&", Or: "||", Implies: "->", Until: "U"}[type(f)]
    return f"({to_text(f.left)} {sym} {to_text(f.right)})"


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(r"\s*(?:(->|&&|\|\||==|!=|[()!.,])|(-?\d+|0x[0-9a-fA-F]+)|([A-Za-z_][A-Za-z0-9_]*))")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(m.lastindex)
        if m.group(1):
            out.append(("op", m.group(1), start))
        elif m.group(2):
            out.append(("int", m.group(2), start))
        else:
            out.append(("id", m.group(3), start))
        pos = m.end()
    out.append(("eof", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def take(self) -> tuple[str, str, int]:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value: str) -> None:
        kind, v, pos = self.take()
        if v != value or kind == "eof":
            raise FormulaError(f"expected {value!r}, found {v or 'end of input'!r}", pos)

    def at(self, value: str) -> bool:
        kind, v, _ = self.peek()
        return kind in ("op", "id") and v == value

    def implies(self) -> Formula:
        left = self.or_()
        if self.at("->"):
            self.take()
            return Implies(left, self.implies())
        return left

    def or_(self) -> Formula:
        f = self.and_()
        while self.at("||"):
            self.take()
            f = Or(f, self.and_())
        return f

    def and_(self) -> Formula:
        f = self.until()
        while self.at("&&"):
            self.take()
            f = And(f, self.until())
        return f

    def until(self) -> Formula:
        left = self.unary()
        if self.at("U"):
            self.take()
            return Until(left, self.until())
        return left

    def unary(self) -> Formula:
        kind, v, pos = self.peek()
        if kind == "op" and v == "!":
            self.take()
            return Not(self.unary())
        if kind == "id" and v in ("X", "F", "G"):
            self.take()
            sub = self.unary()
            return {"X": Next, "F": Eventually, "G": Globally}[v](sub)
        if kind == "id" and v in ("exists", "forall"):
            self.take()
            vk, name, vpos = self.take()
            if vk != "id" or name in KEYWORDS or name in SYSCALL_ATOMS:
                raise FormulaError(f"bad variable name {name!r}", vpos)
            self.expect(".")
            body = self.unary()
            return (Exists if v == "exists" else Forall)(name, body)
        return self.primary()

    def primary(self) -> Formula:
        kind, v, pos = self.peek()
        if kind == "op" and v == "(":
            self.take()
            f = self.implies()
            self.expect(")")
            return f
        return self.atom()

    def term(self) -> Term:
        kind, v, pos = self.take()
        if kind == "int":
            return int(v, 0)
        if kind == "id" and v not in KEYWORDS:
            return Var(v)
        raise FormulaError(f"expected a term, found {v or 'end of input'!r}", pos)

    def atom(self) -> Formula:
        kind, v, pos = self.peek()
        if kind == "eof":
            raise FormulaError("unexpected end of formula", pos)
        if kind == "id" and v in ("true", "false"):
            self.take()
            return Atom(v)
        if kind == "id" and v == "uid":
            self.take()
            _, cmp, cpos = self.take()
            if cmp not in ("==", "!="):
                raise FormulaError("expected == or != after uid", cpos)
            return Atom("uid_eq" if cmp == "==" else "uid_ne", (self.term(),))
        if kind == "id" and v == "reads_sensitive":
            self.take()
            return Atom("reads_sensitive")
        if kind == "id" and v in _SYM_ATOMS and self.toks[self.i + 1][1] == "(":
            self.take()
            self.expect("(")
            _, name, npos = self.take()
            self.expect(")")
            return Atom(v, (_resolve_symbol(_SYM_ATOMS[v], name, npos),))
        if kind == "id" and v == "send" and self.toks[self.i + 1][1] == "(":
            self.take()
            self.expect("(")
            t = self.term()
            self.expect(")")
            return Atom("send_to", (t,))
        if kind == "id" and v in SYSCALL_ATOMS:
            self.take()
            return Atom("syscall", (SYSCALL_ATOMS[v],))
        if kind in ("id", "int"):
            left = self.term()
            _, cmp, cpos = self.take()
            if cmp not in ("==", "!="):
                raise FormulaError(f"unknown atom {v!r}", pos)
            return Atom("eq" if cmp == "==" else "ne", (left, self.term()))
        raise FormulaError(f"unexpected token {v!r}", pos)


def _resolve_symbol(space: str, name: str, pos: int) -> str:
    up = name.upper()
    if space == "path" and up in PATH_IDS:
        return up
    if space == "region" and up in REGION_NAMES:
        return up
    if space == "perm" and up and all(c in PERM_BITS for c in up):
        return perm_name(sum(PERM_BITS[c] for c in set(up)))
    raise FormulaError(f"unknown {space} {name!r}", pos)


def parse_formula(text: str, allow_free: bool = False) -> Formula:
    p = _Parser(text)
    f = p.implies()
    kind, v, pos = p.peek()
    if kind != "eof":
        raise FormulaError(f"unexpected trailing {v!r}", pos)
    if not allow_free:
        fv = free_vars(f)
        if fv:
            raise FormulaError(f"free variable(s) {sorted(fv)} at top level")
    return f


# ---------------------------------------------------------------------------
# semantics


@dataclass(frozen=True)
class Position:
    uid: int
    event: TraceEvent | None


def positions(trace: Trace) -> list[Position]:
    """Initial state followed by one position per event."""
    return [Position(trace.initial_uid, None)] + [Position(e.uid, e) for e in trace.events]


def value_domain(trace: Trace) -> list[int]:
    vals = {trace.initial_uid}
    for e in trace.events:
        vals.update(e.args)
        vals.add(e.uid)
    return sorted(vals)


def _term_val(t: Term, env: dict[str, int]) -> int:
    return env[t.name] if isinstance(t, Var) else t


def atom_holds(a: Atom, p: Position, env: dict[str, int]) -> bool:
    pred = a.pred
    if pred == "true":
        return True
    if pred == "false":
        return False
    if pred == "uid_eq":
        return p.uid == _term_val(a.args[0], env)
    if pred == "uid_ne":
        return p.uid != _term_val(a.args[0], env)
    if pred == "eq":
        return _term_val(a.args[0], env) == _term_val(a.args[1], env)
    if pred == "ne":
        return _term_val(a.args[0], env) != _term_val(a.args[1], env)
    e = p.event
    if e is None:
        return False
    if pred == "syscall":
        kind = a.args[0]
        if e.kind is EventKind.UID_CHANGE:
            return kind is SyscallKind.SETUID
        return e.kind is EventKind.SYSCALL and e.syscall is kind
    if pred == "writes_region":
        return e.kind is EventKind.MEM_WRITE and region_of(e.args[0]) == a.args[0]
    if e.kind is not EventKind.SYSCALL:
        return False
    if pred == "send_to":
        return e.syscall is SyscallKind.SEND and e.args[0] == _term_val(a.args[0], env)
    if pred == "reads_sensitive":
        return e.syscall is SyscallKind.READ_FILE and e.args[1] == 1
    if pred == "reads":
        return e.syscall is SyscallKind.READ_FILE and PATH_IDS[e.args[0]] == a.args[0]
    if pred == "writes_to":
        return e.syscall is SyscallKind.WRITE_FILE and PATH_IDS[e.args[0]] == a.args[0]
    if pred == "mprotect":
        bits = sum(PERM_BITS[c] for c in a.args[0]) if a.args[0] != "NONE" else 0
        return e.syscall is SyscallKind.MPROTECT and (e.args[1] & bits) == bits
    raise FormulaError(f"unknown atom {pred!r}")


class _Evaluator:
    """Bottom-up evaluation: one truth vector over all positions per subformula."""

    def __init__(self, trace: Trace):
        self.pos = positions(trace)
        self.n = len(self.pos)
        self.domain = value_domain(trace)
        self.cache: dict[tuple, list[bool]] = {}

    def vec(self, f: Formula, env: dict[str, int]) -> list[bool]:
        fv = free_vars(f)
        key = (f, tuple(sorted((k, v) for k, v in env.items() if k in fv)))
        hit = self.cache.get(key)
        if hit is None:
            hit = self._compute(f, env)
            self.cache[key] = hit
        return hit

    def _compute(self, f: Formula, env: dict[str, int]) -> list[bool]:
        n = self.n
        if isinstance(f, Atom):
            return [atom_holds(f, p, env) for p in self.pos]
        if isinstance(f, Not):
            return [not x for x in self.vec(f.sub, env)]
        if isinstance(f, And):
            return [a and b for a, b in zip(self.vec(f.left, env), self.vec(f.right, env))]
        if isinstance(f, Or):
            return [a or b for a, b in zip(self.vec(f.left, env), self.vec(f.right, env))]
        if isinstance(f, Implies):
            return [(not a) or b for a, b in zip(self.vec(f.left, env), self.vec(f.right, env))]
        if isinstance(f, Next):
            s = self.vec(f.sub, env)
            return s[1:] + [False]
        if isinstance(f, (Eventually, Globally)):
            s = self.vec(f.sub, env)
            out = [False] * n
            acc = isinstance(f, Globally)
            for i in range(n - 1, -1, -1):
                acc = (acc and s[i]) if isinstance(f, Globally) else (acc or s[i])
                out[i] = acc
            return out
        if isinstance(f, Until):
            a, b = self.vec(f.left, env), self.vec(f.right, env)
            out = [False] * n
            nxt = False
            for i in range(n - 1, -1, -1):
                nxt = b[i] or (a[i] and nxt)
                out[i] = nxt
            return out
        if isinstance(f, (Exists, Forall)):
            is_ex = isinstance(f, Exists)
            out = [not is_ex] * n
            for v in self.domain:
                s = self.vec(f.body, {**env, f.var: v})
                out = [o or x for o, x in zip(out, s)] if is_ex else [o and x for o, x in zip(out, s)]
            return out
        raise FormulaError(f"not a formula: {f!r}")


def holds(trace: Trace, formula: Formula, at: int = 0) -> bool:
    """Does ``trace`` satisfy the closed ``formula`` at position ``at``?"""
    ev = _Evaluator(trace)
    if not 0 <= at < ev.n:
        return False
    return ev.vec(formula, {})[at]


# ---------------------------------------------------------------------------
# specification sets


@dataclass(frozen=True)
class SpecSet:
    formulas: tuple[tuple[str, Formula], ...]

    def __post_init__(self):
        for name, f in self.formulas:
            if free_vars(f):
                raise FormulaError(f"spec {name!r} is not closed")

    def __len__(self) -> int:
        return len(self.formulas)

    def __iter__(self):
        return iter(self.formulas)

    def names(self) -> list[str]:
        return [n for n, _ in self.formulas]

    def to_text(self) -> str:
        return "".join(f"{name}: {to_text(f)}\n" for name, f in self.formulas)


BUILTIN_SPEC_TEXT = {
    "exfil": "F(reads_sensitive && F(send))",
    "privesc": "F(uid != 0 && X(uid == 0))",
    "persist": "F(writes_to(CRON) || writes_to(SYSTEMD))",
    "poly": "F(mprotect(RWX) && F(writes_region(TEXT_SECTION)))",
}


def builtin_specs() -> SpecSet:
    return SpecSet(tuple((name, parse_formula(text)) for name, text in BUILTIN_SPEC_TEXT.items()))


def parse_specs(text: str) -> SpecSet:
    """``name: formula`` per line; ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, body = line.partition(":")
        if not sep or not name.strip():
            raise FormulaError(f"line {lineno}: expected 'name: formula'")
        try:
            out.append((name.strip(), parse_formula(body)))
        except FormulaError as exc:
            raise FormulaError(f"line {lineno}: {exc}") from None
    if not out:
        raise FormulaError("spec file defines no formulas")
    return SpecSet(tuple(out))


def classify_trace(trace: Trace, specs: SpecSet) -> list[str]:
    """Names of the specs the trace satisfies (empty means benign)."""
    if not len(specs):
        raise ValueError("empty spec set")
    ev = _Evaluator(trace)
    return [name for name, f in specs if ev.vec(f, {})[0]]


def atom_vocabulary() -> list[Atom]:
    """Closed atoms used for template mining, most behaviour-specific first."""
    atoms = [
        Atom("reads_sensitive"),
        Atom("syscall", (SyscallKind.SEND,)),
        Atom("writes_to", ("CRON",)),
        Atom("writes_to", ("SYSTEMD",)),
        Atom("mprotect", ("RWX",)),
        Atom("writes_region", ("TEXT_SECTION",)),
        Atom("uid_eq", (0,)),
    ]
    atoms += [Atom("writes_to", (p,)) for p in PATH_IDS if p not in ("CRON", "SYSTEMD")]
    atoms += [Atom("reads", (p,)) for p in PATH_IDS]
    atoms += [Atom("writes_region", (r,)) for r in REGION_NAMES if r != "TEXT_SECTION"]
    atoms += [Atom("syscall", (k,)) for k in SyscallKind if k is not SyscallKind.SEND]
    atoms.append(Atom("uid_ne", (0,)))
    return atoms


def iter_subformulas(f: Formula) -> Iterable[Formula]:
    yield f
    if isinstance(f, (Exists, Forall)):
        yield from iter_subformulas(f.body)
    elif isinstance(f, (Not, Next, Eventually, Globally)):
        yield from iter_subformulas(f.sub)
    elif not isinstance(f, Atom):
        yield from iter_subformulas(f.left)
        yield from iter_subformulas(f.right)
