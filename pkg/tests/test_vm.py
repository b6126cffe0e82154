import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_program_text
from tracehunt.vm import (
    AsmError, EventKind, MachineState, Opcode, SyscallKind, disassemble, initial_state, parse_program,
    pretty_print, region_of, run_concrete, step, trace_prefix, window_bounds,
)

# --- parsing --------------------------------------------------------------


def test_minimal_program():
    p = parse_program("entry: HALT")
    assert len(p) == 1 and p.entry == 0


def test_forward_label_resolves():
    p = parse_program("entry:\n JMP end\n CONST r0, 1\nend:\n HALT\n")
    assert p.instructions[0].args[0].loc == 2


def test_round_trip_random_programs():
    rng = random.Random(0)
    for _ in range(50):
        p = parse_program(random_program_text(rng))
        assert parse_program(pretty_print(p)) == p


@pytest.mark.parametrize("src, fragment", [
    ("entry:\n FOO r1\n", "unknown"),
    ("entry:\n JMP nowhere\n", "nowhere"),
    ("entry:\n CONST r9, 1\n", "r9"),
    ("entry:\n ADD r1, r2\n", "operand"),
])
def test_parse_errors_carry_line_numbers(src, fragment):
    with pytest.raises(AsmError) as exc:
        parse_program(src)
    assert exc.value.line == 2
    assert fragment in str(exc.value)


def test_empty_program_rejected():
    with pytest.raises(AsmError):
        parse_program("; nothing here\n")


# --- stepping -------------------------------------------------------------


def test_step_const():
    p = parse_program("entry:\n CONST r0, 7\n HALT\n")
    s, ev = step(p, initial_state(p))
    assert s.regs[0] == 7 and s.pc == 1 and ev is None


def test_step_setuid_emits_uid_change():
    p = parse_program("entry:\n SYSCALL SETUID, 0\n HALT\n")
    s, ev = step(p, initial_state(p, uid=1000))
    assert s.uid == 0
    assert ev.kind is EventKind.UID_CHANGE and ev.args == (1000, 0)


def test_step_branch_taken():
    p = parse_program("entry:\n BR.lt r0, r1, target\n HALT\ntarget:\n HALT\n")
    state = MachineState(pc=0, regs=(2, 5, 0, 0, 0, 0, 0, 0))
    s, ev = step(p, state)
    assert s.pc == 2 and ev.kind is EventKind.BRANCH and ev.args == (0, 1)


def test_step_does_not_mutate_input_state():
    p = parse_program("entry:\n STORE r0, 8192, r1\n HALT\n")
    s0 = initial_state(p)
    s1, _ = step(p, s0)
    assert s0.mem == {} and s1.mem == {8192: 0}


def test_input_past_end_reads_zero():
    p = parse_program("entry:\n INPUT r0\n INPUT r1\n HALT\n")
    t = run_concrete(p, b"\x09")
    assert t.final_state.regs[:2] == (9, 0)


def test_fault_halts_with_event():
    p = parse_program("entry:\n CONST r0, -5\n LOAD r1, r0, 0\n SYSCALL SEND, 1\n HALT\n")
    t = run_concrete(p)
    assert t.faulted and t.events[-1].kind is EventKind.FAULT
    assert not t.syscalls()


def test_halt_program_trace():
    t = run_concrete(parse_program("entry: HALT"), b"\xff")
    assert t.events == () and t.steps == 1 and not t.truncated


def test_step_limit_truncates():
    p = parse_program("entry:\nloop:\n JMP loop\n")
    t = run_concrete(p, step_limit=100)
    assert t.steps == 100 and t.truncated


def test_falling_off_the_end_halts():
    t = run_concrete(parse_program("entry:\n CONST r0, 1\n"))
    assert t.steps == 1 and not t.truncated


def test_wrapping_arithmetic_and_shifts():
    p = parse_program("entry:\n CONST r0, -1\n ADD r1, r0, 1\n CONST r2, 1\n SHL r3, r2, 33\n HALT\n")
    regs = run_concrete(p).final_state.regs
    assert regs[1] == 0 and regs[3] == 2


def test_syscall_events():
    src = """entry:
        SYSCALL READ_FILE, SENSITIVE_DOC
        SYSCALL SOCKET, r1
        SYSCALL SEND, r1, 7
        SYSCALL MPROTECT, TEXT_SECTION, RWX
        CONST r2, 4096
        STORE r2, 0, r1
        HALT
    """
    t = run_concrete(parse_program(src))
    assert t.syscalls() == [SyscallKind.READ_FILE, SyscallKind.SOCKET, SyscallKind.SEND, SyscallKind.MPROTECT]
    write = t.events[-1]
    assert write.kind is EventKind.MEM_WRITE and region_of(write.args[0]) == "TEXT_SECTION"


# --- properties -------------------------------------------------------------


_EMITTERS = {
    EventKind.SYSCALL: {Opcode.SYSCALL},
    EventKind.UID_CHANGE: {Opcode.SYSCALL},
    EventKind.MEM_WRITE: {Opcode.STORE},
    EventKind.BRANCH: {Opcode.BR},
    EventKind.FAULT: {Opcode.LOAD, Opcode.STORE},
}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), data=st.binary(max_size=6), limit=st.integers(1, 200))
def test_run_properties(seed, data, limit):
    p = parse_program(random_program_text(random.Random(seed)))
    t = run_concrete(p, data, step_limit=limit)
    assert t == run_concrete(p, data, step_limit=limit)  # determinism
    steps = [e.step for e in t.events]
    assert steps == sorted(set(steps))
    for e in t.events:
        assert p.instructions[e.loc].op in _EMITTERS[e.kind]
    short = run_concrete(p, data, step_limit=max(1, limit // 2))
    assert short.events == t.events[: len(short.events)]
    assert short.pcs == t.pcs[: len(short.pcs)]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), data=st.binary(max_size=6), cut=st.integers(0, 60))
def test_trace_prefix_matches_shorter_run(seed, data, cut):
    p = parse_program(random_program_text(random.Random(seed)))
    full = run_concrete(p, data, step_limit=80)
    pre = trace_prefix(full, cut)
    assert pre.events == tuple(e for e in full.events if e.step < cut)
    assert pre.pcs == full.pcs[:cut]


# --- disassembly ------------------------------------------------------------


def test_disassemble_window_one_is_the_instruction():
    p = parse_program("entry:\n CONST r0, 1\n ADD r1, r0, 2\n HALT\n")
    text = disassemble(p, 1, window=1)
    assert "ADD r1, r0, 2" in text and "CONST" not in text and "HALT" not in text


def test_disassemble_clips_at_start():
    p = parse_program("entry:\n" + " CONST r0, 1\n" * 10 + " HALT\n")
    # the window stays centred, so the part before the entry is dropped
    assert window_bounds(p, 0, 5) == (0, 3)
    assert window_bounds(p, 10, 5) == (8, 11)
    assert disassemble(p, 0, 5).count("\n") == 4  # label line plus three instructions


def test_disassemble_full_window_equals_pretty_print():
    p = parse_program(random_program_text(random.Random(3)))
    assert disassemble(p, len(p) // 2, window=10 * len(p)) == pretty_print(p)


def test_disassemble_rejects_bad_center():
    with pytest.raises(IndexError):
        disassemble(parse_program("entry: HALT"), 5)
