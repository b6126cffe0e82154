import random

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_program_text
from tracehunt import features as F
from tracehunt.solver import Binary, BoolOp, Cmp, Const, PathConstraint, SymByte
from tracehunt.vm import SyscallKind, parse_program, run_concrete

b0, b1 = SymByte(0), SymByte(1)


def test_layout():
    assert F.DIM == 21
    assert F.FEATURE_NAMES[F.syscall_slot(SyscallKind.READ_FILE)] == "syscall_READ_FILE"
    assert (F.SYM_SLICE.stop, F.SYSCALL_SLICE.stop, F.MEM_SLICE.stop, F.CFG_SLICE.stop) == (4, 13, 17, 21)


# --- symbolic features -------------------------------------------------------


def test_symbolic_top():
    assert F.symbolic_features(PathConstraint()).tolist() == [0, 0, 0, 0]


def test_symbolic_single_compare():
    assert F.symbolic_features(PathConstraint.of(Cmp("ult", b0, Const(10)))).tolist() == [1, 2, 0, 0]


def test_symbolic_bitwise_and_or():
    masked = Cmp("eq", Binary("and", b0, Const(0xF)), Const(3))
    either = BoolOp("or", (Cmp("eq", b1, Const(1)), Cmp("eq", b1, Const(2))))
    f = F.symbolic_features(PathConstraint.of(masked, either))
    assert f.tolist() == [2, 3, 1, 1]


# --- bags ---------------------------------------------------------------------


def test_syscall_bag():
    p = parse_program("entry:\n SYSCALL SEND, 1\n SYSCALL SEND, 2\n SYSCALL READ_FILE, TMP\n HALT\n")
    bag = F.syscall_bag(run_concrete(p))
    assert bag[F.syscall_slot(SyscallKind.SEND) - 4] == 2
    assert bag[F.syscall_slot(SyscallKind.READ_FILE) - 4] == 1
    assert bag.sum() == 3
    assert not F.syscall_bag(run_concrete(parse_program("entry: HALT"))).any()


def test_bag_ignores_order():
    a = run_concrete(parse_program("entry:\n SYSCALL SEND, 1\n SYSCALL EXEC, TMP\n SYSCALL TIME, r0\n HALT\n"))
    b = run_concrete(parse_program("entry:\n SYSCALL TIME, r0\n SYSCALL SEND, 1\n SYSCALL EXEC, TMP\n HALT\n"))
    assert np.array_equal(F.syscall_bag(a), F.syscall_bag(b))


def test_memory_profile():
    p = parse_program("entry:\n CONST r0, 4096\n STORE r0, 0, r1\n STORE r0, 8192, r1\n STORE r0, 1, r1\n HALT\n")
    assert F.memory_profile(run_concrete(p)).tolist() == [0, 2, 1, 0]


# --- CFG ----------------------------------------------------------------------

IF_ELSE = parse_program("""
entry:
    BR.eq r0, 0, other
    CONST r1, 1
    JMP join
other:
    CONST r1, 2
join:
    HALT
""")


def test_straight_line_cfg():
    p = parse_program("entry:\n CONST r0, 1\n ADD r0, r0, 1\n HALT\n")
    g = F.build_cfg(run_concrete(p), p)
    assert len(g.nodes) == 1 and not g.edges
    assert F.cfg_features(g).tolist() == [1, 0, 1, 0]


def test_if_else_cfg():
    g = F.build_cfg(run_concrete(IF_ELSE), IF_ELSE)
    assert g.nodes == {0, 3, 4} and g.edges == {(0, 3), (3, 4)}


def test_loop_back_edge_counted_once():
    p = parse_program("""
    entry:
        CONST r0, 0
    loop:
        ADD r0, r0, 1
        BR.ult r0, 3, loop
        HALT
    """)
    g = F.build_cfg(run_concrete(p), p)
    assert (1, 1) in g.edges
    assert F.cfg_features(g)[3] == 1


def test_diamond_cyclomatic():
    g = F.DynCFG(frozenset({0, 1, 2, 3}), frozenset({(0, 1), (0, 2), (1, 3), (2, 3)}), 0)
    assert F.cfg_features(g).tolist() == [4, 4, 2, 0]


def test_doubly_nested_loops():
    edges = {(0, 1), (1, 2), (2, 3), (3, 2), (3, 1), (1, 4)}
    g = F.DynCFG(frozenset(range(5)), frozenset(edges), 0)
    loops = F.natural_loops(g)
    assert loops == {1: frozenset({1, 2, 3}), 2: frozenset({2, 3})}
    assert F.max_loop_nesting(g) == 2


def _random_graph(rng: random.Random, n: int) -> F.DynCFG:
    edges = {(i, i + 1) for i in range(n - 1)}  # reachable chain
    for _ in range(rng.randint(0, 2 * n)):
        edges.add((rng.randrange(n), rng.randrange(n)))
    return F.DynCFG(frozenset(range(n)), frozenset(edges), 0)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**9), n=st.integers(1, 12))
def test_dominators_match_networkx(seed, n):
    g = _random_graph(random.Random(seed), n)
    G = nx.DiGraph(list(g.edges))
    G.add_nodes_from(g.nodes)
    idom = nx.immediate_dominators(G, 0)
    dom = F.dominators(g)
    for v in idom:
        chain, x = {v}, v
        while idom[x] != x:
            x = idom[x]
            chain.add(x)
        assert dom[v] == chain
    assert F.cfg_features(g)[2] == len(g.edges) - len(g.nodes) + 2 * nx.number_weakly_connected_components(G)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**9), data=st.binary(max_size=4))
def test_cfg_of_real_runs(seed, data):
    p = parse_program(random_program_text(random.Random(seed)))
    t = run_concrete(p, data, step_limit=300)
    g = F.build_cfg(t, p)
    assert g == F.build_cfg(run_concrete(p, data, step_limit=300), p)
    for a, b in g.edges:
        assert a in g.nodes and b in g.nodes
    f = F.cfg_features(g)
    assert f[2] == f[1] - f[0] + 2 * F.connected_components(g)


# --- assembly ---------------------------------------------------------------


def test_extract_is_concatenation():
    t = run_concrete(IF_ELSE)
    pi = PathConstraint.of(Cmp("ult", b0, Const(3)))
    v = F.extract(pi, t, IF_ELSE)
    parts = np.concatenate([F.symbolic_features(pi), F.syscall_bag(t), F.memory_profile(t),
                            F.cfg_features(F.build_cfg(t, IF_ELSE))])
    assert np.array_equal(v, parts) and v.shape == (F.DIM,)
    assert np.array_equal(v, F.extract(pi, t, IF_ELSE))


def test_extract_empty_inputs():
    p = parse_program("entry: HALT")
    v = F.extract(PathConstraint(), run_concrete(p), p)
    expected = np.zeros(F.DIM)
    expected[F.CFG_SLICE.start] = 1  # one block
    expected[F.CFG_SLICE.start + 2] = 1  # cyclomatic 0 - 1 + 2
    assert np.array_equal(v, expected)


def test_json_round_trip_and_layout_guard():
    v = np.arange(F.DIM, dtype=float)
    assert np.array_equal(F.from_json(F.to_json(v)), v)
    bad = F.to_json(v) | {"vocab_hash": "deadbeef"}
    with pytest.raises(F.LayoutMismatch):
        F.from_json(bad)
    with pytest.raises(F.LayoutMismatch):
        F.from_json(F.to_json(v) | {"values": [1.0]})
