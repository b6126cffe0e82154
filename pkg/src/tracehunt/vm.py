"""A small register VM standing in for real binaries.

Assembly format, one instruction per line, ``;`` starts a comment::

    .meta name exfil_0001        ; optional metadata
    entry:                       ; the label ``entry`` (if any) is the entry point
        INPUT r0
        BR.eq r0, 66, payload
        HALT
    payload:
        SYSCALL READ_FILE, SENSITIVE_DOC
        SYSCALL SOCKET, r5
        SYSCALL SEND, r5, r0
        HALT

Registers are ``r0``..``r7`` holding 32-bit words.  Memory is byte addressed.
``INPUT rd`` reads the next input byte (zero past the end).  Syscalls take
their operands after a comma; see :data:`SYSCALL_SIGNATURES`.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MASK32 = 0xFFFFFFFF
NUM_REGS = 8
DEFAULT_ADDRESS_BOUND = 0x10000
DEFAULT_UID = 1000


class AsmError(ValueError):
    """Raised for malformed assembly; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Opcode(enum.Enum):
    CONST = "CONST"
    MOV = "MOV"
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    AND = "AND"
    OR = "OR"
    XOR = "XOR"
    NOT = "NOT"
    SHL = "SHL"
    SHR = "SHR"
    LOAD = "LOAD"
    STORE = "STORE"
    JMP = "JMP"
    BR = "BR"
    INPUT = "INPUT"
    SYSCALL = "SYSCALL"
    HALT = "HALT"


BINARY_OPS = (Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND, Opcode.OR, Opcode.XOR, Opcode.SHL, Opcode.SHR)
BRANCH_CMPS = ("eq", "ne", "lt", "le", "gt", "ge", "ult", "ule", "ugt", "uge")


class SyscallKind(enum.Enum):
    READ_FILE = "READ_FILE"
    SEND = "SEND"
    WRITE_FILE = "WRITE_FILE"
    MPROTECT = "MPROTECT"
    SETUID = "SETUID"
    GETUID = "GETUID"
    TIME = "TIME"
    EXEC = "EXEC"
    SOCKET = "SOCKET"


SYSCALL_VOCAB: tuple[SyscallKind, ...] = tuple(SyscallKind)

# closed path-id vocabulary; only SENSITIVE_DOC is sensitive
PATH_IDS = ("SENSITIVE_DOC", "CRON", "SYSTEMD", "TMP", "LOG", "TEXT_SECTION")
SENSITIVE_PATHS = frozenset({"SENSITIVE_DOC"})

# memory regions as [lo, hi) address ranges
MEM_REGIONS: tuple[tuple[str, int, int], ...] = (
    ("LOW", 0x0000, 0x1000),
    ("TEXT_SECTION", 0x1000, 0x2000),
    ("DATA", 0x2000, 0x8000),
    ("STACK", 0x8000, 0x10000),
)
REGION_NAMES = tuple(r[0] for r in MEM_REGIONS)

PERM_BITS = {"R": 4, "W": 2, "X": 1}

SOCKET_FD = 3

# operand classes: "path", "region", "perm" are symbols; "val" is reg-or-imm;
# "reg" is a destination register.  A trailing "?" marks an optional operand.
SYSCALL_SIGNATURES: dict[SyscallKind, tuple[str, ...]] = {
    SyscallKind.READ_FILE: ("path",),
    SyscallKind.SEND: ("val", "val?"),
    SyscallKind.WRITE_FILE: ("path",),
    SyscallKind.MPROTECT: ("region", "perm"),
    SyscallKind.SETUID: ("val",),
    SyscallKind.GETUID: ("reg",),
    SyscallKind.TIME: ("reg",),
    SyscallKind.EXEC: ("path",),
    SyscallKind.SOCKET: ("reg",),
}


def region_of(addr: int) -> str | None:
    for name, lo, hi in MEM_REGIONS:
        if lo <= addr < hi:
            return name
    return None


def perm_name(bits: int) -> str:
    if bits == 0:
        return "NONE"
    return "".join(c for c in "RWX" if bits & PERM_BITS[c])


def to_signed(v: int) -> int:
    v &= MASK32
    return v - (1 << 32) if v & 0x80000000 else v


# ---------------------------------------------------------------------------
# program representation


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self) -> str:
        return f"r{self.index}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Sym:
    """A symbolic name from a closed vocabulary (path id, region, perm flags)."""

    space: str
    name: str
    value: int

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Target:
    label: str
    loc: int

    def __str__(self) -> str:
        return self.label


Operand = Reg | Imm | Sym | Target


@dataclass(frozen=True)
class Instruction:
    op: Opcode
    args: tuple[Operand, ...] = ()
    cmp: str | None = None
    kind: SyscallKind | None = None

    def mnemonic(self) -> str:
        if self.op is Opcode.BR:
            return f"BR.{self.cmp}"
        return self.op.value

    def __str__(self) -> str:
        parts = [str(a) for a in self.args]
        if self.op is Opcode.SYSCALL:
            parts = [self.kind.value] + parts
        return self.mnemonic() + (" " + ", ".join(parts) if parts else "")


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    entry: int = 0
    labels: dict[str, int] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.instructions)
        if n == 0:
            raise AsmError("program has no instructions")
        if not 0 <= self.entry < n:
            raise AsmError(f"entry {self.entry} out of range")
        for name, loc in self.labels.items():
            if not 0 <= loc < n:
                raise AsmError(f"label {name!r} points outside the program")
        for ins in self.instructions:
            for a in ins.args:
                if isinstance(a, Target) and not 0 <= a.loc < n:
                    raise AsmError(f"jump target {a.label!r} out of range")

    def __len__(self) -> int:
        return len(self.instructions)

    def __hash__(self) -> int:
        return hash((self.instructions, self.entry))

    def labels_at(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for name, loc in sorted(self.labels.items(), key=lambda kv: (kv[1], kv[0])):
            out.setdefault(loc, []).append(name)
        return out

    @property
    def name(self) -> str:
        return self.meta.get("name", "")


# ---------------------------------------------------------------------------
# parsing and printing

_LABEL_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*):\s*(.*)$")
_REG_RE = re.compile(r"^[rR](\d+)$")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def _parse_int(tok: str, line: int) -> int:
    try:
        v = int(tok, 0)
    except ValueError:
        raise AsmError(f"expected integer, got {tok!r}", line) from None
    if not -(1 << 31) <= v <= MASK32:
        raise AsmError(f"immediate {tok} does not fit in 32 bits", line)
    return to_signed(v)


def _parse_reg(tok: str, line: int) -> Reg:
    m = _REG_RE.match(tok)
    if not m:
        raise AsmError(f"expected register, got {tok!r}", line)
    idx = int(m.group(1))
    if not 0 <= idx < NUM_REGS:
        raise AsmError(f"register {tok} out of range r0..r{NUM_REGS - 1}", line)
    return Reg(idx)


def _parse_val(tok: str, line: int) -> Reg | Imm:
    if _REG_RE.match(tok):
        return _parse_reg(tok, line)
    return Imm(_parse_int(tok, line))


def _parse_sym(space: str, tok: str, line: int) -> Sym:
    tok_u = tok.upper()
    if space == "path":
        if tok_u not in PATH_IDS:
            raise AsmError(f"unknown path id {tok!r}", line)
        return Sym(space, tok_u, PATH_IDS.index(tok_u))
    if space == "region":
        if tok_u not in REGION_NAMES:
            raise AsmError(f"unknown region {tok!r}", line)
        return Sym(space, tok_u, REGION_NAMES.index(tok_u))
    if space == "perm":
        if tok_u == "NONE":
            return Sym(space, "NONE", 0)
        if not tok_u or any(c not in PERM_BITS for c in tok_u) or len(set(tok_u)) != len(tok_u):
            raise AsmError(f"bad permission flags {tok!r}", line)
        bits = sum(PERM_BITS[c] for c in tok_u)
        return Sym(space, perm_name(bits), bits)
    raise AssertionError(space)


def _split_operands(rest: str) -> list[str]:
    rest = rest.strip()
    if not rest:
        return []
    return [t.strip() for t in rest.split(",")]


def parse_program(text: str) -> Program:
    """Parse assembly text into a :class:`Program` (two passes for labels)."""
    pending: list[tuple[int, str, list[str]]] = []  # (line, mnemonic, operands)
    labels: dict[str, int] = {}
    meta: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".meta"):
            parts = line.split(None, 2)
            if len(parts) < 2:
                raise AsmError("'.meta' needs a key", lineno)
            meta[parts[1]] = parts[2] if len(parts) > 2 else ""
            continue
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            name = m.group(1)
            if name in labels:
                raise AsmError(f"duplicate label {name!r}", lineno)
            labels[name] = len(pending)
            line = m.group(2).strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        pending.append((lineno, head, _split_operands(rest)))

    instructions = []
    for lineno, head, ops in pending:
        instructions.append(_build_instruction(lineno, head, ops, labels))
    if not instructions:
        raise AsmError("program has no instructions")
    for name, loc in labels.items():
        if loc >= len(instructions):
            raise AsmError(f"label {name!r} does not precede an instruction")
    return Program(tuple(instructions), labels.get("entry", 0), labels, meta)


def _arity(ops: list[str], n: int, lineno: int, mnem: str) -> None:
    if len(ops) != n:
        raise AsmError(f"{mnem} expects {n} operands, got {len(ops)}", lineno)


def _target(tok: str, labels: dict[str, int], lineno: int) -> Target:
    if not _IDENT_RE.match(tok):
        raise AsmError(f"bad label {tok!r}", lineno)
    if tok not in labels:
        raise AsmError(f"unresolved label {tok!r}", lineno)
    return Target(tok, labels[tok])


def _build_instruction(lineno: int, head: str, ops: list[str], labels: dict[str, int]) -> Instruction:
    mnem = head.upper()
    if mnem.startswith("BR."):
        cmp = head[3:].lower()
        if cmp not in BRANCH_CMPS:
            raise AsmError(f"unknown branch comparison {cmp!r}", lineno)
        _arity(ops, 3, lineno, head)
        return Instruction(
            Opcode.BR,
            (_parse_reg(ops[0], lineno), _parse_val(ops[1], lineno), _target(ops[2], labels, lineno)),
            cmp=cmp,
        )
    if mnem in SyscallKind.__members__:
        # bare syscall mnemonic, e.g. "SETUID 0"
        return _build_syscall(lineno, SyscallKind[mnem], ops)
    try:
        op = Opcode(mnem)
    except ValueError:
        raise AsmError(f"unknown opcode {head!r}", lineno) from None
    if op is Opcode.CONST:
        _arity(ops, 2, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno), Imm(_parse_int(ops[1], lineno))))
    if op in (Opcode.MOV, Opcode.NOT):
        _arity(ops, 2, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno), _parse_reg(ops[1], lineno)))
    if op in BINARY_OPS:
        _arity(ops, 3, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno), _parse_reg(ops[1], lineno), _parse_val(ops[2], lineno)))
    if op is Opcode.LOAD:
        _arity(ops, 3, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno), _parse_reg(ops[1], lineno), Imm(_parse_int(ops[2], lineno))))
    if op is Opcode.STORE:
        _arity(ops, 3, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno), Imm(_parse_int(ops[1], lineno)), _parse_reg(ops[2], lineno)))
    if op is Opcode.JMP:
        _arity(ops, 1, lineno, mnem)
        return Instruction(op, (_target(ops[0], labels, lineno),))
    if op is Opcode.INPUT:
        _arity(ops, 1, lineno, mnem)
        return Instruction(op, (_parse_reg(ops[0], lineno),))
    if op is Opcode.HALT:
        _arity(ops, 0, lineno, mnem)
        return Instruction(op)
    if op is Opcode.SYSCALL:
        if not ops:
            raise AsmError("SYSCALL needs a kind", lineno)
        first, *rest = ops
        # allow "SYSCALL KIND arg, arg" as well as "SYSCALL KIND, arg"
        kind_tok, _, extra = first.partition(" ")
        if extra.strip():
            rest = [extra.strip()] + rest
        try:
            kind = SyscallKind[kind_tok.upper()]
        except KeyError:
            raise AsmError(f"unknown syscall {kind_tok!r}", lineno) from None
        return _build_syscall(lineno, kind, rest)
    raise AsmError(f"unknown opcode {head!r}", lineno)  # pragma: no cover


def _build_syscall(lineno: int, kind: SyscallKind, ops: list[str]) -> Instruction:
    sig = SYSCALL_SIGNATURES[kind]
    required = [s for s in sig if not s.endswith("?")]
    if not len(required) <= len(ops) <= len(sig):
        raise AsmError(f"{kind.value} expects {len(required)}..{len(sig)} operands, got {len(ops)}", lineno)
    args: list[Operand] = []
    for cls, tok in zip(sig, ops):
        cls = cls.rstrip("?")
        if cls == "val":
            args.append(_parse_val(tok, lineno))
        elif cls == "reg":
            args.append(_parse_reg(tok, lineno))
        else:
            args.append(_parse_sym(cls, tok, lineno))
    return Instruction(Opcode.SYSCALL, tuple(args), kind=kind)


def format_listing(program: Program, start: int, stop: int) -> str:
    at = program.labels_at()
    lines = []
    for loc in range(start, stop):
        for name in at.get(loc, ()):
            lines.append(f"{name}:")
        lines.append(f"    {program.instructions[loc]}")
    return "\n".join(lines) + ("\n" if lines else "")


def pretty_print(program: Program) -> str:
    """Canonical assembly text; ``parse_program`` inverts it exactly."""
    head = "".join(f".meta {k} {v}".rstrip() + "\n" for k, v in program.meta.items())
    return head + format_listing(program, 0, len(program))


def disassemble(program: Program, center: int, window: int = 16) -> str:
    """Listing of up to ``window`` instructions around ``center``, clipped at the ends."""
    return format_listing(program, *window_bounds(program, center, window))


def window_bounds(program: Program, center: int, window: int = 16) -> tuple[int, int]:
    """``[start, stop)`` of the disassembly window around ``center``."""
    if not 0 <= center < len(program):
        raise IndexError(f"location {center} outside program")
    if window < 1:
        return center, center
    first = center - (window - 1) // 2
    return max(0, first), min(len(program), first + window)


def trace_prefix(trace: Trace, step: int) -> Trace:
    """The part of ``trace`` produced before VM step ``step``."""
    events = tuple(e for e in trace.events if e.step < step)
    return Trace(
        events, trace.pcs[:step], min(step, trace.steps),
        truncated=step < trace.steps or trace.truncated,
        faulted=any(e.kind is EventKind.FAULT for e in events), initial_uid=trace.initial_uid,
    )


# ---------------------------------------------------------------------------
# execution


class EventKind(enum.Enum):
    SYSCALL = "SyscallRecord"
    UID_CHANGE = "UidChange"
    MEM_WRITE = "MemWrite"
    BRANCH = "BranchTaken"
    FAULT = "Fault"


@dataclass(frozen=True)
class TraceEvent:
    """One observable step.

    ``args`` meaning by kind: SYSCALL -> syscall argument values, UID_CHANGE ->
    (old, new), MEM_WRITE -> (address, byte), BRANCH -> (site, taken),
    FAULT -> (address,).  ``uid`` is the uid after the step.
    """

    step: int
    loc: int
    kind: EventKind
    syscall: SyscallKind | None = None
    args: tuple[int, ...] = ()
    uid: int = DEFAULT_UID

    def to_json(self) -> dict:
        d = {"step": self.step, "loc": self.loc, "kind": self.kind.value, "args": list(self.args), "uid": self.uid}
        if self.syscall is not None:
            d["syscall"] = self.syscall.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TraceEvent":
        return cls(
            d["step"], d["loc"], EventKind(d["kind"]),
            SyscallKind(d["syscall"]) if "syscall" in d else None,
            tuple(d["args"]), d["uid"],
        )


@dataclass(frozen=True)
class MachineState:
    pc: int
    regs: tuple[int, ...] = (0,) * NUM_REGS
    mem: dict[int, int] = field(default_factory=dict)
    uid: int = DEFAULT_UID
    input_cursor: int = 0
    halted: bool = False
    steps: int = 0

    def __hash__(self) -> int:
        return hash((self.pc, self.regs, tuple(sorted(self.mem.items())), self.uid, self.input_cursor, self.halted))


def initial_state(program: Program, uid: int = DEFAULT_UID) -> MachineState:
    return MachineState(pc=program.entry, uid=uid)


@dataclass(frozen=True)
class Trace:
    events: tuple[TraceEvent, ...]
    pcs: tuple[int, ...]
    steps: int
    truncated: bool = False
    faulted: bool = False
    initial_uid: int = DEFAULT_UID
    final_state: MachineState | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def branch_directions(self) -> tuple[tuple[int, int], ...]:
        return tuple((e.args[0], e.args[1]) for e in self.events if e.kind is EventKind.BRANCH)

    def syscalls(self) -> list[SyscallKind]:
        """Syscall kinds in order; a uid change counts as SETUID."""
        out = []
        for e in self.events:
            if e.kind is EventKind.SYSCALL:
                out.append(e.syscall)
            elif e.kind is EventKind.UID_CHANGE:
                out.append(SyscallKind.SETUID)
        return out

    def to_json(self) -> dict:
        return {
            "events": [e.to_json() for e in self.events],
            "pcs": list(self.pcs),
            "steps": self.steps,
            "truncated": self.truncated,
            "faulted": self.faulted,
            "initial_uid": self.initial_uid,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trace":
        return cls(
            tuple(TraceEvent.from_json(e) for e in d["events"]), tuple(d["pcs"]), d["steps"],
            d["truncated"], d["faulted"], d["initial_uid"],
        )


def _val(op: Operand, regs: Sequence[int]) -> int:
    if isinstance(op, Reg):
        return regs[op.index]
    return op.value & MASK32


def compare(cmp: str, a: int, b: int) -> bool:
    """Branch comparison on 32-bit words (signed unless prefixed with ``u``)."""
    if cmp.startswith("u"):
        x, y = a & MASK32, b & MASK32
        cmp = cmp[1:]
    else:
        x, y = to_signed(a), to_signed(b)
    if cmp == "eq":
        return x == y
    if cmp == "ne":
        return x != y
    if cmp == "lt":
        return x < y
    if cmp == "le":
        return x <= y
    if cmp == "gt":
        return x > y
    if cmp == "ge":
        return x >= y
    raise ValueError(cmp)


def _binop(op: Opcode, a: int, b: int) -> int:
    if op is Opcode.ADD:
        return (a + b) & MASK32
    if op is Opcode.SUB:
        return (a - b) & MASK32
    if op is Opcode.MUL:
        return (a * b) & MASK32
    if op is Opcode.AND:
        return a & b
    if op is Opcode.OR:
        return a | b
    if op is Opcode.XOR:
        return a ^ b
    if op is Opcode.SHL:
        return (a << (b & 31)) & MASK32
    if op is Opcode.SHR:
        return (a & MASK32) >> (b & 31)
    raise ValueError(op)


class _Machine:
    """Mutable scratch state used by the interpreter loops.

    ``execute`` applies exactly one instruction and returns the emitted event,
    if any.  :func:`step` wraps it with value semantics.
    """

    __slots__ = ("program", "pc", "regs", "mem", "uid", "cursor", "halted", "steps", "data", "bound", "_mem_shared")

    def __init__(self, program: Program, state: MachineState, data: bytes, bound: int):
        self.program = program
        self.pc = state.pc
        self.regs = list(state.regs)
        self.mem = state.mem
        self._mem_shared = True
        self.uid = state.uid
        self.cursor = state.input_cursor
        self.halted = state.halted
        self.steps = state.steps
        self.data = data
        self.bound = bound

    def snapshot(self) -> MachineState:
        self._mem_shared = True
        return MachineState(self.pc, tuple(self.regs), self.mem, self.uid, self.cursor, self.halted, self.steps)

    def read_input(self) -> int:
        v = self.data[self.cursor] if self.cursor < len(self.data) else 0
        self.cursor += 1
        return v

    def _write_mem(self, addr: int, value: int) -> None:
        if self._mem_shared:
            self.mem = dict(self.mem)
            self._mem_shared = False
        self.mem[addr] = value

    def execute(self) -> TraceEvent | None:
        ins = self.program.instructions[self.pc]
        loc = self.pc
        step_no = self.steps
        self.steps += 1
        regs = self.regs
        op = ins.op
        nxt = loc + 1
        event = None
        if op is Opcode.CONST:
            regs[ins.args[0].index] = ins.args[1].value & MASK32
        elif op is Opcode.MOV:
            regs[ins.args[0].index] = regs[ins.args[1].index]
        elif op in BINARY_OPS:
            regs[ins.args[0].index] = _binop(op, regs[ins.args[1].index], _val(ins.args[2], regs))
        elif op is Opcode.NOT:
            regs[ins.args[0].index] = ~regs[ins.args[1].index] & MASK32
        elif op is Opcode.LOAD:
            addr = to_signed(regs[ins.args[1].index]) + ins.args[2].value
            if not 0 <= addr < self.bound:
                return self._fault(step_no, loc, addr)
            regs[ins.args[0].index] = self.mem.get(addr, 0)
        elif op is Opcode.STORE:
            addr = to_signed(regs[ins.args[0].index]) + ins.args[1].value
            if not 0 <= addr < self.bound:
                return self._fault(step_no, loc, addr)
            byte = regs[ins.args[2].index] & 0xFF
            self._write_mem(addr, byte)
            event = TraceEvent(step_no, loc, EventKind.MEM_WRITE, None, (addr, byte), self.uid)
        elif op is Opcode.JMP:
            nxt = ins.args[0].loc
        elif op is Opcode.BR:
            taken = compare(ins.cmp, regs[ins.args[0].index], _val(ins.args[1], regs))
            if taken:
                nxt = ins.args[2].loc
            event = TraceEvent(step_no, loc, EventKind.BRANCH, None, (loc, int(taken)), self.uid)
        elif op is Opcode.INPUT:
            regs[ins.args[0].index] = self.read_input()
        elif op is Opcode.SYSCALL:
            event = self._syscall(ins, step_no, loc)
        elif op is Opcode.HALT:
            self.halted = True
            return None
        self.pc = nxt
        if nxt >= len(self.program.instructions):
            self.halted = True  # falling off the end halts
        return event

    def _fault(self, step_no: int, loc: int, addr: int) -> TraceEvent:
        self.halted = True
        return TraceEvent(step_no, loc, EventKind.FAULT, None, (addr,), self.uid)

    def _syscall(self, ins: Instruction, step_no: int, loc: int) -> TraceEvent:
        kind = ins.kind
        regs = self.regs
        a = ins.args
        if kind is SyscallKind.SETUID:
            old, new = self.uid, _val(a[0], regs)
            self.uid = new
            return TraceEvent(step_no, loc, EventKind.UID_CHANGE, SyscallKind.SETUID, (old, new), new)
        if kind is SyscallKind.READ_FILE:
            args = (a[0].value, int(a[0].name in SENSITIVE_PATHS))
        elif kind is SyscallKind.SEND:
            args = (_val(a[0], regs), _val(a[1], regs) if len(a) > 1 else 0)
        elif kind in (SyscallKind.WRITE_FILE, SyscallKind.EXEC):
            args = (a[0].value,)
        elif kind is SyscallKind.MPROTECT:
            args = (a[0].value, a[1].value)
        elif kind is SyscallKind.GETUID:
            regs[a[0].index] = self.uid
            args = (self.uid,)
        elif kind is SyscallKind.TIME:
            # environment reading modelled as the next input byte
            v = self.read_input()
            regs[a[0].index] = v
            args = (v,)
        elif kind is SyscallKind.SOCKET:
            regs[a[0].index] = SOCKET_FD
            args = (SOCKET_FD,)
        else:  # pragma: no cover
            raise ValueError(kind)
        return TraceEvent(step_no, loc, EventKind.SYSCALL, kind, args, self.uid)


def step(
    program: Program,
    state: MachineState,
    data: bytes | Sequence[int] = b"",
    address_bound: int = DEFAULT_ADDRESS_BOUND,
) -> tuple[MachineState, TraceEvent | None]:
    """Apply one instruction; the input state is not modified."""
    if state.halted:
        raise ValueError("cannot step a halted machine")
    m = _Machine(program, state, bytes(data), address_bound)
    event = m.execute()
    return m.snapshot(), event


def run_concrete(
    program: Program,
    data: bytes | Sequence[int] = b"",
    step_limit: int = 10_000,
    uid: int = DEFAULT_UID,
    address_bound: int = DEFAULT_ADDRESS_BOUND,
) -> Trace:
    """Run from the entry point until HALT, a fault, or ``step_limit`` steps."""
    if step_limit < 1:
        raise ValueError("step_limit must be >= 1")
    m = _Machine(program, initial_state(program, uid), bytes(data), address_bound)
    events: list[TraceEvent] = []
    pcs: list[int] = []
    faulted = False
    while not m.halted and m.steps < step_limit:
        pcs.append(m.pc)
        ev = m.execute()
        if ev is not None:
            events.append(ev)
            if ev.kind is EventKind.FAULT:
                faulted = True
    return Trace(tuple(events), tuple(pcs), m.steps, truncated=not m.halted, faulted=faulted,
                 initial_uid=uid, final_state=m.snapshot())


def iter_syscall_instructions(program: Program, locs: Iterable[int]) -> Iterable[SyscallKind]:
    for loc in locs:
        ins = program.instructions[loc]
        if ins.op is Opcode.SYSCALL:
            yield ins.kind
