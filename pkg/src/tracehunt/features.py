"""Fixed-layout feature vectors for a (path constraint, trace, program) triple.

Layout (d = 21)::

    [0:4)    symbolic: #vars, max clause depth, #OR nodes, #clauses with bitwise ops
    [4:13)   syscall bag, one slot per SyscallKind in vocabulary order
    [13:17)  memory writes per region (LOW, TEXT_SECTION, DATA, STACK)
    [17:21)  dynamic CFG: #blocks, #edges, cyclomatic complexity, max loop nesting
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .solver import Binary, BoolOp, PathConstraint, Unary, depth, iter_nodes
from .vm import REGION_NAMES, SYSCALL_VOCAB, EventKind, Opcode, Program, SyscallKind, Trace, region_of

FEATURE_VERSION = 1

SYM_NAMES = ("sym_vars", "sym_depth", "sym_disjunctions", "sym_bitwise_clauses")
SYSCALL_NAMES = tuple(f"syscall_{k.value}" for k in SYSCALL_VOCAB)
MEM_NAMES = tuple(f"memwrite_{r}" for r in REGION_NAMES)
CFG_NAMES = ("cfg_blocks", "cfg_edges", "cfg_cyclomatic", "cfg_loop_nesting")
FEATURE_NAMES = SYM_NAMES + SYSCALL_NAMES + MEM_NAMES + CFG_NAMES
DIM = len(FEATURE_NAMES)

SYM_SLICE = slice(0, 4)
SYSCALL_SLICE = slice(4, 4 + len(SYSCALL_VOCAB))
MEM_SLICE = slice(SYSCALL_SLICE.stop, SYSCALL_SLICE.stop + len(REGION_NAMES))
CFG_SLICE = slice(MEM_SLICE.stop, DIM)

VOCAB_HASH = hashlib.sha256("\n".join(FEATURE_NAMES).encode()).hexdigest()[:16]


def syscall_slot(kind: SyscallKind) -> int:
    return SYSCALL_SLICE.start + SYSCALL_VOCAB.index(kind)


class LayoutMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# constraint features


def _has_bitwise(clause) -> bool:
    for n in iter_nodes(clause):
        if isinstance(n, Binary) and n.op in ("and", "or", "xor", "shl", "shr"):
            return True
        if isinstance(n, Unary) and n.op == "not":
            return True
    return False


def symbolic_features(pi: PathConstraint) -> np.ndarray:
    out = np.zeros(4)
    if pi.is_top:
        return out
    out[0] = len(pi.variables())
    out[1] = max(depth(c) for c in pi.clauses)
    out[2] = sum(1 for c in pi.clauses for n in iter_nodes(c) if isinstance(n, BoolOp) and n.op == "or")
    out[3] = sum(1 for c in pi.clauses if _has_bitwise(c))
    return out


# ---------------------------------------------------------------------------
# trace bags


def syscall_bag(trace: Trace) -> np.ndarray:
    out = np.zeros(len(SYSCALL_VOCAB))
    for kind in trace.syscalls():
        out[SYSCALL_VOCAB.index(kind)] += 1
    return out


def memory_profile(trace: Trace) -> np.ndarray:
    out = np.zeros(len(REGION_NAMES))
    for e in trace.events:
        if e.kind is EventKind.MEM_WRITE:
            r = region_of(e.args[0])
            if r is not None:
                out[REGION_NAMES.index(r)] += 1
    return out


# ---------------------------------------------------------------------------
# dynamic control-flow graph


@dataclass(frozen=True)
class DynCFG:
    nodes: frozenset[int]  # block leader locations
    edges: frozenset[tuple[int, int]]
    entry: int | None

    def successors(self) -> dict[int, list[int]]:
        succ: dict[int, list[int]] = {n: [] for n in self.nodes}
        for a, b in sorted(self.edges):
            succ[a].append(b)
        return succ


def leaders(program: Program) -> frozenset[int]:
    """Block starts: the entry, every jump/branch target, every fall-through after one."""
    out = {program.entry}
    for loc, ins in enumerate(program.instructions):
        if ins.op in (Opcode.BR, Opcode.JMP):
            out.add(ins.args[-1].loc)
            if loc + 1 < len(program):
                out.add(loc + 1)
    return frozenset(out)


def build_cfg(trace: Trace, program: Program) -> DynCFG:
    """Blocks and transitions observed along the executed pcs."""
    if not trace.pcs:
        return DynCFG(frozenset(), frozenset(), None)
    lead = leaders(program)
    nodes: set[int] = set()
    edges: set[tuple[int, int]] = set()
    current = trace.pcs[0]
    nodes.add(current)
    prev_pc = current
    for pc in trace.pcs[1:]:
        if pc in lead or pc != prev_pc + 1:
            nodes.add(pc)
            edges.add((current, pc))
            current = pc
        prev_pc = pc
    return DynCFG(frozenset(nodes), frozenset(edges), trace.pcs[0])


def connected_components(g: DynCFG) -> int:
    parent = {n: n for n in g.nodes}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in g.edges:
        parent[find(a)] = find(b)
    return len({find(n) for n in g.nodes})


def dominators(g: DynCFG) -> dict[int, frozenset[int]]:
    """Iterative dataflow over nodes reachable from the entry."""
    if g.entry is None:
        return {}
    succ = g.successors()
    order, seen, stack = [], {g.entry}, [g.entry]
    while stack:
        n = stack.pop()
        order.append(n)
        for s in succ[n]:
            if s not in seen:
                seen.add(s)
                stack.append(s)
    preds: dict[int, list[int]] = {n: [] for n in order}
    for a, b in g.edges:
        if a in seen and b in seen:
            preds[b].append(a)
    everything = frozenset(order)
    dom = {n: everything for n in order}
    dom[g.entry] = frozenset({g.entry})
    changed = True
    while changed:
        changed = False
        for n in order:
            if n == g.entry:
                continue
            ps = [dom[p] for p in preds[n]]
            new = (frozenset.intersection(*ps) if ps else frozenset()) | {n}
            if new != dom[n]:
                dom[n] = new
                changed = True
    return dom


def natural_loops(g: DynCFG) -> dict[int, frozenset[int]]:
    """Header -> loop body, merging back edges that share a header."""
    dom = dominators(g)
    preds: dict[int, list[int]] = {n: [] for n in g.nodes}
    for a, b in g.edges:
        preds[b].append(a)
    loops: dict[int, set[int]] = {}
    for a, h in g.edges:
        if a in dom and h in dom[a]:
            body = loops.setdefault(h, {h})
            stack = [a]
            while stack:
                n = stack.pop()
                if n not in body:
                    body.add(n)
                    stack.extend(preds[n])
    return {h: frozenset(b) for h, b in loops.items()}


def max_loop_nesting(g: DynCFG) -> int:
    loops = natural_loops(g)
    if not loops:
        return 0
    return max(sum(1 for body in loops.values() if n in body) for n in g.nodes)


def cfg_features(g: DynCFG) -> np.ndarray:
    v, e = len(g.nodes), len(g.edges)
    p = connected_components(g)
    return np.array([v, e, e - v + 2 * p, max_loop_nesting(g)], dtype=float)


# ---------------------------------------------------------------------------
# assembly


def extract(pi: PathConstraint, trace: Trace, program: Program) -> np.ndarray:
    return np.concatenate([
        symbolic_features(pi),
        syscall_bag(trace),
        memory_profile(trace),
        cfg_features(build_cfg(trace, program)),
    ])


def stack(vectors: Iterable[np.ndarray]) -> np.ndarray:
    rows = [np.asarray(v, dtype=float) for v in vectors]
    if not rows:
        return np.zeros((0, DIM))
    return np.vstack(rows)


def to_json(vec: np.ndarray) -> dict:
    return {"version": FEATURE_VERSION, "vocab_hash": VOCAB_HASH, "values": [float(x) for x in vec]}


def from_json(d: dict) -> np.ndarray:
    check_layout(d.get("version"), d.get("vocab_hash"))
    vals = np.asarray(d["values"], dtype=float)
    if vals.shape != (DIM,):
        raise LayoutMismatch(f"expected {DIM} values, got {vals.shape}")
    return vals


def check_layout(version, vocab_hash) -> None:
    if version != FEATURE_VERSION or vocab_hash != VOCAB_HASH:
        raise LayoutMismatch(
            f"feature layout mismatch: stored (version={version}, hash={vocab_hash}) "
            f"vs current (version={FEATURE_VERSION}, hash={VOCAB_HASH})"
        )
