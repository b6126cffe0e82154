import itertools
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracehunt import classifier as C
from tracehunt.corpus import CorpusSpec, case_study_program, generate_corpus
from tracehunt.logic import builtin_specs, classify_trace
from tracehunt.oracle import prior_params
from tracehunt.pipeline import (
    REPORT_SCHEMA, STRATEGIES, BenchRow, DetectOptions, Prioritizer, StrategyResult, auc_roc, average_ranks,
    compute_metrics, detect, evaluate, labeled_paths, refine_scorer, run_benchmark,
)
from tracehunt.vm import parse_program, run_concrete

PRIVESC = parse_program(".meta name privesc\nentry:\n SYSCALL SETUID, 0\n HALT\n")
HALT = parse_program(".meta name halt\nentry: HALT")
GUARDED = parse_program("""
.meta name guarded
.meta inputs 2
entry:
    INPUT r0
    INPUT r1
    BR.ne r0, 66, out
    SYSCALL READ_FILE, SENSITIVE_DOC
    SYSCALL SOCKET, r2
    SYSCALL SEND, r2, r1
out:
    HALT
""")
LOOKALIKE = parse_program("""
.meta name lookalike
.meta inputs 1
entry:
    INPUT r0
    BR.ne r0, 9, out
    SYSCALL READ_FILE, TMP
    SYSCALL SEND, 1, 0
out:
    HALT
""")


# --- detect ----------------------------------------------------------------------------


def test_unconditional_privesc():
    r = detect(PRIVESC)
    assert r.verdict is C.Verdict.MALICIOUS and r.matched == ["privesc"] and r.paths_explored == 1


def test_halt_is_benign_after_one_path():
    r = detect(HALT)
    assert r.verdict is C.Verdict.BENIGN and r.paths_explored == 1 and r.detection is None


def test_guard_forces_witness_byte():
    r = detect(GUARDED)
    assert r.verdict is C.Verdict.MALICIOUS and r.witness[0] == 0x42
    assert "exfil" in classify_trace(run_concrete(GUARDED, r.witness), builtin_specs())


def test_case_study_has_three_guard_clauses():
    p = case_study_program()
    r = detect(p)
    assert r.matched == ["exfil"] and len(r.detection.pi) == 3
    # one clause per guard, each guard falling through towards the payload
    assert [s.loc for s in r.detection.pi.sites] == [p.labels[f"guard{i}"] for i in range(3)]
    assert not any(s.taken for s in r.detection.pi.sites)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_detects(strategy):
    r = detect(GUARDED, opts=DetectOptions(strategy=strategy, seed=1))
    assert r.verdict is C.Verdict.MALICIOUS and r.paths_explored <= 2


def test_budget_caps_exploration():
    r = detect(case_study_program(), opts=DetectOptions(budget=2, strategy="dfs"))
    assert r.paths_explored <= 2
    with pytest.raises(ValueError):
        detect(HALT, opts=DetectOptions(budget=0))


def _always_malicious() -> C.EncoderParams:
    params = C.init_params(C.ModelConfig(d_model=8, n_layers=1, n_heads=1, d_ff=8, max_len=32), 0)
    params.tensors["head_w2"][:] = 0
    params.tensors["head_b2"][...] = 50.0
    return params


def test_strict_mode_refuses_unverified_classifier_flag(tmp_path):
    log = tmp_path / "log.jsonl"
    opts = DetectOptions(classifier=_always_malicious(), log_path=log)
    r = detect(LOOKALIKE, opts=opts)
    assert r.verdict is C.Verdict.BENIGN and r.unverified_flags == 2
    events = [json.loads(x)["event"] for x in log.read_text().splitlines()]
    assert events.count("classifier-flagged-unverified") == 2 and events[-1] == "done"
    loose = detect(LOOKALIKE, opts=DetectOptions(classifier=_always_malicious(), strict=False))
    assert loose.verdict is C.Verdict.MALICIOUS and loose.matched == []


def test_find_all_collects_every_detection():
    p = parse_program("""
    .meta name two
    .meta inputs 1
    entry:
        INPUT r0
        BR.eq r0, 1, b
        SYSCALL SETUID, 0
        HALT
    b:
        SYSCALL WRITE_FILE, CRON
        HALT
    """)
    r = detect(p, opts=DetectOptions(find_all=True))
    assert sorted(m for d in r.all_detections for m in d.matched) == ["persist", "privesc"]
    assert len(r.to_json()["detections"]) == 2


def test_report_schema_and_determinism():
    a = detect(case_study_program(), opts=DetectOptions(seed=4))
    b = detect(case_study_program(), opts=DetectOptions(seed=4))
    jsonschema.validate(a.to_json(), REPORT_SCHEMA)
    jsonschema.validate(detect(HALT).to_json(), REPORT_SCHEMA)
    assert a.dumps() == b.dumps()


def test_history_records_guided_contexts():
    history = []
    detect(case_study_program(), opts=DetectOptions(), history=history)
    assert history and all(0.0 <= h.omega <= 1.0 for h in history)
    assert history[-1].label is C.Verdict.MALICIOUS


def test_prioritizer_strategies():
    with pytest.raises(ValueError):
        Prioritizer("greedy")
    assert Prioritizer("guided").scorer == prior_params()


# --- metrics -----------------------------------------------------------------------


def test_perfect_predictions():
    m = compute_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1, m.auc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_all_positive_predictor():
    m = compute_metrics([1, 1, 1, 1], [1, 0, 1, 0])
    assert (m.accuracy, m.recall, m.precision) == (0.5, 1.0, 0.5)
    assert m.f1 == pytest.approx(2 / 3)


def test_single_class_auc_is_absent():
    assert compute_metrics([1, 0], [1, 1]).auc is None


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_six_sample_auc_matches_pairwise_count():
    scores = [0.9, 0.4, 0.65, 0.4, 0.2, 0.8]
    labels = [1, 1, 0, 0, 0, 1]
    assert auc_roc(scores, labels) == pytest.approx(_pairwise_auc(scores, labels)) == pytest.approx(7.5 / 9)


@settings(max_examples=100, deadline=None)
@given(data=st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pairwise_on_random_data(data):
    scores, labels = [float(s) for s, _ in data], [int(y) for _, y in data]
    got = auc_roc(scores, labels)
    if len(set(labels)) < 2:
        assert got is None
    else:
        assert got == pytest.approx(_pairwise_auc(scores, labels))


def test_average_ranks_ties():
    assert average_ranks([3, 1, 3, 2]).tolist() == [3.5, 1.0, 3.5, 2.0]


@settings(max_examples=100)
@given(pairs=st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_metric_ranges(pairs):
    m = compute_metrics([int(p) for p, _ in pairs], [int(y) for _, y in pairs])
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0
    assert m.tp + m.fp + m.tn + m.fn == len(pairs)
    if m.precision + m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


def test_evaluate_over_fixtures():
    metrics, reports = evaluate([PRIVESC, HALT, GUARDED, LOOKALIKE], [1, 0, 1, 0])
    assert metrics.accuracy == 1.0 and metrics.auc == 1.0 and len(reports) == 4


# --- benchmark ---------------------------------------------------------------------


def test_benchmark_first_fork_corpus():
    res = run_benchmark([GUARDED, PRIVESC], budget=10, repetitions=2, seed=3)
    lines = res.to_csv().splitlines()
    assert lines[0] == "strategy,sample,repetition,paths,found"
    # random repeats, the deterministic strategies run once per sample
    assert len(lines) - 1 == 2 * 2 + 3 * 2
    assert all(r.found and r.paths <= 2 for r in res.rows)


def test_score_error_is_mean_gap_between_omega_and_label():
    res = run_benchmark([GUARDED, case_study_program()], ("dfs", "guided"), budget=20)
    history = []
    for prog in (GUARDED, case_study_program()):
        detect(prog, opts=DetectOptions(budget=20), history=history)
    want = np.mean([abs(h.omega - (h.label is C.Verdict.MALICIOUS)) for h in history])
    assert res.score_error == pytest.approx(want)
    assert res.summary()["guided"]["score_error"] == res.score_error
    assert "score_error" not in res.summary()["dfs"]
    assert run_benchmark([GUARDED], ("dfs",), budget=5).score_error is None


def test_reduction_arithmetic():
    rows = [BenchRow("dfs", f"s{i}", 0, p, True) for i, p in enumerate([10, 20, 40])]
    rows += [BenchRow("guided", f"s{i}", 0, p, True) for i, p in enumerate([2, 5, 30])]
    rows += [BenchRow("random", "s0", 0, 50, False)]
    res = StrategyResult(rows, budget=50)
    assert res.median("dfs") == 20 and res.median("guided") == 5
    assert res.reduction_vs_dfs("guided") == (20 - 5) / 20
    assert res.paths_for("random") == [51]
    assert res.summary()["random"]["not_found"] == 1


# --- training data and refinement ------------------------------------------------------


def test_labeled_paths_follow_spec_matches():
    data = labeled_paths([GUARDED, LOOKALIKE])
    assert sorted(d.label for d in data) == [0, 0, 0, 1]
    for d in data:
        assert d.label == int(bool(classify_trace(d.trace, builtin_specs())))


def test_refine_scorer_is_deterministic():
    corpus = generate_corpus(CorpusSpec(seed=2, samples=2, benign_fraction=0.0, decoys=2, trigger_depth=2))
    progs = [s.program for s in corpus]
    seen = []
    a = refine_scorer(progs, epochs=2, budget=50, on_epoch=lambda e, p, n: seen.append(n))
    b = refine_scorer(progs, epochs=2, budget=50)
    assert a == b and a != prior_params() and len(seen) == 2 and all(n > 0 for n in seen)
    assert np.isfinite(a.theta).all()
