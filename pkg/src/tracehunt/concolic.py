"""Concolic execution over the VM.

A concrete run driven by a witness input carries a symbolic shadow of the
registers and memory.  Every branch whose condition mentions a symbolic
input byte adds that condition (or its negation, following the concrete
direction) to the path constraint.  Forked states restart from the entry
point with a new witness; the VM is deterministic so this re-execution is
equivalent to resuming.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

from . import solver
from .solver import (
    Binary, BranchSite, Budget, Cmp, Const, Expr, Model, PathConstraint, SymByte, Unary,
    check_sat, mk_not, negate_branch,
)
from .vm import (
    BINARY_OPS, DEFAULT_ADDRESS_BOUND, DEFAULT_UID, EventKind, Instruction, Opcode, Program, Reg,
    SyscallKind, Trace, TraceEvent, _Machine, compare, initial_state, run_concrete, to_signed,
)

log = logging.getLogger(__name__)

DEFAULT_LOOP_UNROLL = 8
DEFAULT_STEP_LIMIT = 10_000


class ContractViolation(AssertionError):
    pass


@dataclass(frozen=True)
class BranchRecord:
    site: int
    condition: Expr
    taken: bool
    clause_index: int  # 0-based position in the owning path constraint
    step: int = 0  # VM step at which the branch executed

    def flipped_target(self, program: Program) -> int:
        ins = program.instructions[self.site]
        return self.site + 1 if self.taken else ins.args[2].loc


@dataclass(frozen=True)
class SymbolicState:
    loc: int
    pi: PathConstraint
    concrete_witness: Model
    n_sym_bytes: int
    sym_regs: tuple[Expr | None, ...] = (None,) * 8
    sym_mem: dict[int, Expr] = field(default_factory=dict)
    steps_taken: int = 0
    fork_bound: int = 0  # branch records before this clause index are not re-forked

    def __post_init__(self):
        if not self.concrete_witness.satisfies(self.pi):
            raise ContractViolation("witness does not satisfy the path constraint")

    def witness_bytes(self) -> bytes:
        return self.concrete_witness.to_bytes(self.n_sym_bytes)

    def __hash__(self) -> int:
        return hash((self.loc, self.pi, self.concrete_witness))


def init_state(program: Program, n_sym_bytes: int) -> SymbolicState:
    """Entry state: true path constraint, all-zero witness, zero-filled shadow."""
    if n_sym_bytes < 0:
        raise ValueError("n_sym_bytes must be >= 0")
    return SymbolicState(program.entry, PathConstraint(), Model({i: 0 for i in range(n_sym_bytes)}), n_sym_bytes)


def fork_state(state: SymbolicState, pi_new: PathConstraint, model: Model) -> SymbolicState:
    """Child state that re-executes from the entry with ``model`` as witness."""
    if not model.satisfies(pi_new):
        raise ContractViolation("fork model does not satisfy the new path constraint")
    witness = Model({i: model.get(i) for i in range(state.n_sym_bytes)})
    if not witness.satisfies(pi_new):
        raise ContractViolation("path constraint mentions bytes beyond the symbolic input")
    return SymbolicState(state.loc, pi_new, witness, state.n_sym_bytes, fork_bound=len(pi_new))


def default_sym_bytes(program: Program) -> int:
    """``.meta inputs N`` if present, else the number of input-reading instructions."""
    if "inputs" in program.meta:
        return int(program.meta["inputs"])
    return sum(
        1 for ins in program.instructions
        if ins.op is Opcode.INPUT or (ins.op is Opcode.SYSCALL and ins.kind is SyscallKind.TIME)
    )


# ---------------------------------------------------------------------------
# symbolic shadow execution

_CMP_MAP = {
    "eq": ("eq", False), "ne": ("ne", False),
    "lt": ("slt", False), "le": ("sle", False), "gt": ("slt", True), "ge": ("sle", True),
    "ult": ("ult", False), "ule": ("ule", False), "ugt": ("ult", True), "uge": ("ule", True),
}


def branch_condition(cmp: str, a: Expr, b: Expr) -> Expr:
    """Boolean expression that is true exactly when the branch is taken."""
    op, swap = _CMP_MAP[cmp]
    return Cmp(op, b, a) if swap else Cmp(op, a, b)


def _mask8(e: Expr) -> Expr:
    if isinstance(e, SymByte):
        return e
    return Binary("and", e, Const(0xFF))


class ExploreResult(NamedTuple):
    trace: Trace
    pi: PathConstraint
    branches: list[BranchRecord]
    diverged: bool = False


def explore(
    state: SymbolicState,
    program: Program,
    step_limit: int = DEFAULT_STEP_LIMIT,
    loop_unroll_limit: int = DEFAULT_LOOP_UNROLL,
    address_bound: int = DEFAULT_ADDRESS_BOUND,
) -> ExploreResult:
    """Run the witness concretely while accumulating the path constraint.

    Every symbolic branch contributes a clause; a branch site stops producing
    :class:`BranchRecord` entries (fork points) once it has contributed
    ``loop_unroll_limit`` clauses.  ``diverged`` is set if the run does not
    retrace the branch directions recorded in ``state.pi``.
    """
    data = state.witness_bytes()
    m = _Machine(program, initial_state(program, DEFAULT_UID), data, address_bound)
    n_sym = state.n_sym_bytes
    sregs: list[Expr | None] = list(state.sym_regs)
    smem: dict[int, Expr] = dict(state.sym_mem)
    pi = PathConstraint()
    records: list[BranchRecord] = []
    per_site: dict[int, int] = {}
    events: list[TraceEvent] = []
    pcs: list[int] = []
    faulted = False

    def sval(op) -> Expr | None:
        return sregs[op.index] if isinstance(op, Reg) else None

    def as_expr(sym: Expr | None, conc: int) -> Expr:
        return sym if sym is not None else Const(conc)

    while not m.halted and m.steps < step_limit:
        loc = m.pc
        ins: Instruction = program.instructions[loc]
        op = ins.op
        regs = m.regs
        pcs.append(loc)
        pending_reg: tuple[int, Expr | None] | None = None
        if op is Opcode.CONST:
            pending_reg = (ins.args[0].index, None)
        elif op is Opcode.MOV:
            pending_reg = (ins.args[0].index, sregs[ins.args[1].index])
        elif op in BINARY_OPS:
            a, b = sregs[ins.args[1].index], sval(ins.args[2])
            if a is None and b is None:
                pending_reg = (ins.args[0].index, None)
            else:
                ca = regs[ins.args[1].index]
                cb = regs[ins.args[2].index] if isinstance(ins.args[2], Reg) else ins.args[2].value
                e = Binary(op.value.lower(), as_expr(a, ca), as_expr(b, cb))
                if e.op == "and" and isinstance(e.left, SymByte) and e.right == Const(0xFF):
                    e = e.left
                pending_reg = (ins.args[0].index, e)
        elif op is Opcode.NOT:
            a = sregs[ins.args[1].index]
            pending_reg = (ins.args[0].index, None if a is None else Unary("not", a))
        elif op is Opcode.LOAD:
            addr = to_signed(regs[ins.args[1].index]) + ins.args[2].value
            pending_reg = (ins.args[0].index, smem.get(addr))
        elif op is Opcode.STORE:
            addr = to_signed(regs[ins.args[0].index]) + ins.args[1].value
            v = sregs[ins.args[2].index]
            if 0 <= addr < address_bound:
                if v is None:
                    smem.pop(addr, None)
                else:
                    smem[addr] = _mask8(v)
        elif op is Opcode.INPUT:
            idx = m.cursor
            pending_reg = (ins.args[0].index, SymByte(idx) if idx < n_sym else None)
        elif op is Opcode.SYSCALL:
            if ins.kind is SyscallKind.TIME:
                idx = m.cursor
                pending_reg = (ins.args[0].index, SymByte(idx) if idx < n_sym else None)
            elif ins.kind in (SyscallKind.GETUID, SyscallKind.SOCKET):
                pending_reg = (ins.args[0].index, None)
        elif op is Opcode.BR:
            a, b = sregs[ins.args[0].index], sval(ins.args[1])
            if a is not None or b is not None:
                ca = regs[ins.args[0].index]
                cb = regs[ins.args[1].index] if isinstance(ins.args[1], Reg) else ins.args[1].value
                cond = branch_condition(ins.cmp, as_expr(a, ca), as_expr(b, cb))
                taken = compare(ins.cmp, ca, cb)
                clause = cond if taken else mk_not(cond)
                pi = pi.conjoin(clause, BranchSite(loc, taken))
                count = per_site.get(loc, 0) + 1
                per_site[loc] = count
                if count <= loop_unroll_limit:
                    records.append(BranchRecord(loc, cond, taken, len(pi) - 1, m.steps))
        ev = m.execute()
        if pending_reg is not None:
            sregs[pending_reg[0]] = pending_reg[1]
        if ev is not None:
            events.append(ev)
            if ev.kind is EventKind.FAULT:
                faulted = True
    trace = Trace(tuple(events), tuple(pcs), m.steps, truncated=not m.halted, faulted=faulted,
                  initial_uid=DEFAULT_UID, final_state=m.snapshot())
    prefix = state.pi.sites
    diverged = tuple(pi.sites[: len(prefix)]) != tuple(prefix) if all(s is not None for s in prefix) else False
    if diverged:
        log.warning("replay diverged from recorded branch directions")
    return ExploreResult(trace, pi, records, diverged)


def replay_consistent(program: Program, witness: bytes, pi: PathConstraint, step_limit: int = DEFAULT_STEP_LIMIT) -> bool:
    """Does a plain concrete run of ``witness`` take every direction recorded in ``pi``?"""
    trace = run_concrete(program, witness, step_limit)
    return sites_consistent(trace, pi)


def sites_consistent(trace: Trace, pi: PathConstraint) -> bool:
    """Check ``pi``'s provenance against the branch events of ``trace`` in order.

    Each recorded site must appear, in order, among the trace's branch events
    with the same direction (concrete branches in between are skipped).
    """
    branches = iter(trace.branch_directions())
    for site in pi.sites:
        if site is None:
            continue
        for loc, taken in branches:
            if loc == site.loc:
                if bool(taken) != site.taken:
                    return False
                break
        else:
            return False
    return True


# ---------------------------------------------------------------------------
# priority queue


class ExplorationQueue:
    """Max-priority queue on omega; ties pop in insertion order."""

    def __init__(self):
        self._heap: list[tuple[float, int, SymbolicState]] = []
        self._seq = itertools.count()

    def push(self, state: SymbolicState, omega: float) -> None:
        heapq.heappush(self._heap, (-float(omega), next(self._seq), state))

    def pop(self) -> tuple[SymbolicState, float]:
        neg, _, state = heapq.heappop(self._heap)
        return state, -neg

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


# ---------------------------------------------------------------------------
# the exploration loop


@dataclass(frozen=True)
class ForkCandidate:
    """What a priority function sees when a new state is about to be queued."""

    pi: PathConstraint
    record: BranchRecord
    parent: SymbolicState
    parent_trace: Trace
    target: int  # location the flipped branch leads to
    seq: int  # global fork counter
    program: Program


PriorityFn = Callable[[ForkCandidate], float]


@dataclass
class PathRecord:
    index: int  # 1-based count of explored paths
    state: SymbolicState
    omega: float
    result: ExploreResult
    sat: solver.SatResult
    replay: Trace | None  # concrete trace of the solver model, None if not SAT
    model_bytes: bytes = b""


@dataclass
class ExplorerStats:
    solver_calls: int = 0
    solver_unknown: int = 0
    forks: int = 0
    duplicates: int = 0
    divergences: int = 0
    vm_steps: int = 0
    solver_seconds: float = 0.0


class Explorer:
    """Pop-explore-solve-replay-fork loop; yields one :class:`PathRecord` per path.

    The consumer decides what a path means (classification, logging) and may
    stop iterating at any point; forks of a path are generated only after the
    consumer resumes the generator, matching "return before forking".
    """

    def __init__(
        self,
        program: Program,
        priority: PriorityFn,
        n_sym_bytes: int | None = None,
        step_limit: int = DEFAULT_STEP_LIMIT,
        loop_unroll_limit: int = DEFAULT_LOOP_UNROLL,
        budget: Budget | None = None,
    ):
        self.program = program
        self.priority = priority
        self.n_sym_bytes = default_sym_bytes(program) if n_sym_bytes is None else n_sym_bytes
        self.step_limit = step_limit
        self.loop_unroll_limit = loop_unroll_limit
        self.budget = budget or Budget()
        self.stats = ExplorerStats()
        self.queue = ExplorationQueue()
        self.seen: set[str] = set()
        self._fork_seq = 0

    def _solve(self, pi: PathConstraint) -> solver.SatResult:
        res = check_sat(pi, self.budget)
        self.stats.solver_calls += 1
        self.stats.solver_seconds += res.elapsed
        if res.status is solver.Status.UNKNOWN:
            self.stats.solver_unknown += 1
            log.info("solver UNKNOWN on %s; dropping path", pi.text())
        return res

    def paths(self, max_paths: int) -> Iterator[PathRecord]:
        root = init_state(self.program, self.n_sym_bytes)
        self.queue.push(root, 1.0)
        self.seen.add(root.pi.text())
        n = 0
        while self.queue and n < max_paths:
            state, omega = self.queue.pop()
            result = explore(state, self.program, self.step_limit, self.loop_unroll_limit)
            n += 1
            self.stats.vm_steps += result.trace.steps
            if result.diverged:
                self.stats.divergences += 1
            sat = self._solve(result.pi)
            replay = None
            model_bytes = b""
            if sat.sat:
                model_bytes = sat.model.to_bytes(self.n_sym_bytes)
                replay = run_concrete(self.program, model_bytes, self.step_limit)
                self.stats.vm_steps += replay.steps
            yield PathRecord(n, state, omega, result, sat, replay, model_bytes)
            if sat.sat:
                self._fork_all(state, result)

    def _fork_all(self, state: SymbolicState, result: ExploreResult) -> None:
        for rec in result.branches:
            if rec.clause_index < state.fork_bound:
                continue
            pi_new = negate_branch(result.pi, rec.clause_index + 1)
            key = pi_new.text() + "|" + repr(pi_new.sites)
            if key in self.seen:
                self.stats.duplicates += 1
                continue
            self.seen.add(key)
            res = self._solve(pi_new)
            if not res.sat:
                continue
            child = fork_state(state, pi_new, res.model)
            cand = ForkCandidate(pi_new, rec, state, result.trace, rec.flipped_target(self.program),
                                 self._fork_seq, self.program)
            self._fork_seq += 1
            omega = float(self.priority(cand))
            self.queue.push(child, omega)
            self.stats.forks += 1


def enumerate_path_constraints(
    program: Program,
    n_sym_bytes: int | None = None,
    max_paths: int = 10_000,
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> list[PathRecord]:
    """Explore in DFS order until the frontier is empty (or ``max_paths``)."""
    ex = Explorer(program, lambda c: 1.0 - 1.0 / (c.seq + 2), n_sym_bytes, step_limit)
    return list(ex.paths(max_paths))
