"""End-to-end detection, strategy benchmarks and metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .classifier import EncoderParams, LabeledPath, Verdict, classify
from .concolic import DEFAULT_STEP_LIMIT, Explorer, ForkCandidate, enumerate_path_constraints
from .logic import SpecSet, builtin_specs, classify_trace
from .oracle import PathContext, RemoteConfig, ScorerParams, fork_context, prior_params, score_heuristic, score_remote
from .refine import DetectionRecord, policy_update
from .solver import Budget, PathConstraint
from .vm import Program

log = logging.getLogger(__name__)

REPORT_VERSION = 1
DEFAULT_BUDGET = 1000
STRATEGIES = ("random", "bfs", "dfs", "guided")


# ---------------------------------------------------------------------------
# priorities


def _pi_key(pi: PathConstraint) -> tuple:
    return pi.text(), pi.sites


class Prioritizer:
    """Strategy-specific omega, remembering each pending path's context."""

    def __init__(self, strategy: str, scorer: ScorerParams | RemoteConfig | None = None, seed: int = 0,
                 window: int = 16):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
        self.strategy = strategy
        self.scorer = prior_params() if scorer is None and strategy == "guided" else scorer
        self.rng = random.Random(seed)
        self.window = window
        self.contexts: dict[tuple, PathContext] = {}

    def __call__(self, cand: ForkCandidate) -> float:
        if self.strategy == "dfs":
            return 1.0 - 1.0 / (cand.seq + 2)
        if self.strategy == "bfs":
            return 1.0 / (1.0 + len(cand.pi))
        if self.strategy == "random":
            return self.rng.random()
        ctx = fork_context(cand, self.window)
        self.contexts[_pi_key(cand.pi)] = ctx
        if isinstance(self.scorer, RemoteConfig):
            return score_remote(ctx, self.scorer)
        return score_heuristic(ctx, self.scorer)

    def context_of(self, pi: PathConstraint) -> PathContext | None:
        return self.contexts.get(_pi_key(pi))


# ---------------------------------------------------------------------------
# detection


@dataclass
class Detection:
    index: int  # which explored path (1-based)
    pi: PathConstraint
    witness: bytes
    matched: list[str]
    score: float

    def to_json(self) -> dict:
        return {"path": self.index, "pi": self.pi.text(), "clauses": self.pi.clause_texts(),
                "witness": self.witness.hex(), "matched": self.matched, "score": self.score}


@dataclass
class DetectionReport:
    program: str
    verdict: Verdict
    detection: Detection | None
    paths_explored: int
    budget: int
    strategy: str
    strict: bool
    find_all: bool = False
    all_detections: list[Detection] = field(default_factory=list)
    unverified_flags: int = 0
    solver_unknown: int = 0
    solver_calls: int = 0
    vm_steps: int = 0
    log_file: str | None = None

    @property
    def matched(self) -> list[str]:
        return self.detection.matched if self.detection else []

    @property
    def witness(self) -> bytes | None:
        return self.detection.witness if self.detection else None

    def to_json(self) -> dict:
        d = {
            "version": REPORT_VERSION,
            "program": self.program,
            "verdict": self.verdict.value,
            "pi": self.detection.pi.text() if self.detection else None,
            "clauses": self.detection.pi.clause_texts() if self.detection else [],
            "constraint": self.detection.pi.to_json() if self.detection else None,
            "witness": self.detection.witness.hex() if self.detection else None,
            "matched_specs": self.matched,
            "score": self.detection.score if self.detection else None,
            "paths_explored": self.paths_explored,
            "budget": self.budget,
            "strategy": self.strategy,
            "strict": self.strict,
            "find_all": self.find_all,
            "log": self.log_file,
            "counters": {
                "solver_calls": self.solver_calls,
                "solver_unknown": self.solver_unknown,
                "vm_steps": self.vm_steps,
                "unverified_flags": self.unverified_flags,
            },
        }
        if self.find_all:
            d["detections"] = [x.to_json() for x in self.all_detections]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "program", "verdict", "pi", "clauses", "constraint", "witness", "matched_specs", "score",
                 "paths_explored", "budget", "strategy", "strict", "find_all", "log", "counters"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "verdict": {"enum": ["MALICIOUS", "BENIGN"]},
        "pi": {"type": ["string", "null"]},
        "clauses": {"type": "array", "items": {"type": "string"}},
        "witness": {"type": ["string", "null"]},
        "matched_specs": {"type": "array", "items": {"type": "string"}},
        "score": {"type": ["number", "null"]},
        "paths_explored": {"type": "integer", "minimum": 0},
        "budget": {"type": "integer", "minimum": 1},
        "strategy": {"enum": list(STRATEGIES)},
        "strict": {"type": "boolean"},
    },
}


@dataclass
class DetectOptions:
    budget: int = DEFAULT_BUDGET
    strategy: str = "guided"
    scorer: ScorerParams | RemoteConfig | None = None
    classifier: EncoderParams | None = None
    tau_thresh: float = 0.5
    strict: bool = True
    find_all: bool = False
    seed: int = 0
    step_limit: int = DEFAULT_STEP_LIMIT
    solver_budget: Budget | None = None
    log_path: str | Path | None = None


def detect(program: Program, specs: SpecSet | None = None, opts: DetectOptions | None = None,
           history: list[DetectionRecord] | None = None) -> DetectionReport:
    """Explore paths in omega order until a verified malicious path or the budget runs out.

    Without classifier parameters a path's verdict is whether its replayed
    trace satisfies a spec.  With them the classifier decides, and in strict
    mode a MALICIOUS call also needs a spec match on the replayed trace.
    ``history`` (if given) receives one record per scored path.
    """
    specs = specs or builtin_specs()
    opts = opts or DetectOptions()
    if opts.budget < 1:
        raise ValueError("budget must be >= 1")
    prio = Prioritizer(opts.strategy, opts.scorer, opts.seed)
    explorer = Explorer(program, prio, step_limit=opts.step_limit, budget=opts.solver_budget)
    report = DetectionReport(program.name, Verdict.BENIGN, None, 0, opts.budget, opts.strategy, opts.strict,
                             opts.find_all, log_file=str(opts.log_path) if opts.log_path else None)
    log_fh = open(opts.log_path, "w") if opts.log_path else None
    started = time.perf_counter()
    try:
        for rec in explorer.paths(opts.budget):
            report.paths_explored = rec.index
            row = {"event": "path", "n": rec.index, "pi": rec.result.pi.text(), "omega": rec.omega,
                   "status": rec.sat.status.value}
            if not rec.sat.sat:
                _write(log_fh, row)
                continue
            trace = rec.replay
            matched = classify_trace(trace, specs)
            if opts.classifier is not None:
                verdict, score = classify(rec.result.pi, trace, program, opts.classifier, opts.tau_thresh)
            else:
                verdict, score = (Verdict.MALICIOUS, 1.0) if matched else (Verdict.BENIGN, 0.0)
            if verdict is Verdict.MALICIOUS and opts.strict and not matched:
                report.unverified_flags += 1
                row["event"] = "classifier-flagged-unverified"
                verdict = Verdict.BENIGN
            row.update(witness=rec.model_bytes.hex(), matched=matched, verdict=verdict.value, score=score)
            _write(log_fh, row)
            ctx = prio.context_of(rec.state.pi)
            if history is not None and ctx is not None:
                history.append(DetectionRecord(ctx, verdict, rec.omega))
            if verdict is Verdict.MALICIOUS:
                det = Detection(rec.index, rec.result.pi, rec.model_bytes, matched, float(score))
                if report.detection is None:
                    report.detection = det
                    report.verdict = Verdict.MALICIOUS
                report.all_detections.append(det)
                if not opts.find_all:
                    break
    finally:
        report.solver_calls = explorer.stats.solver_calls
        report.solver_unknown = explorer.stats.solver_unknown
        report.vm_steps = explorer.stats.vm_steps
        if log_fh is not None:
            _write(log_fh, {"event": "done", "verdict": report.verdict.value, "paths": report.paths_explored,
                            "seconds": round(time.perf_counter() - started, 6)})
            log_fh.close()
    return report


def _write(fh, row: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scorer refinement over a corpus


def refine_scorer(programs: Sequence[Program], params: ScorerParams | None = None, epochs: int = 3,
                  alpha: float = 0.5, budget: int = 200, specs: SpecSet | None = None,
                  on_epoch: Callable[[int, ScorerParams, int], None] | None = None) -> ScorerParams:
    """Alternate guided detection over ``programs`` with one policy update per epoch."""
    params = params or prior_params()
    for epoch in range(epochs):
        history: list[DetectionRecord] = []
        for prog in programs:
            detect(prog, specs, DetectOptions(budget=budget, strategy="guided", scorer=params), history)
        if history:
            params = policy_update(params, history, alpha)
        if on_epoch:
            on_epoch(epoch, params, len(history))
    return params


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    sample: str
    repetition: int
    paths: int
    found: bool


@dataclass
class StrategyResult:
    rows: list[BenchRow]
    budget: int
    score_error: float | None = None  # mean |omega - label| over guided paths; measured, not a bound

    def paths_for(self, strategy: str) -> list[int]:
        """Paths to detection; a miss counts as ``budget + 1``."""
        return [r.paths if r.found else self.budget + 1 for r in self.rows if r.strategy == strategy]

    def median(self, strategy: str) -> float:
        return float(statistics.median(self.paths_for(strategy)))

    def reduction_vs_dfs(self, strategy: str) -> float:
        dfs = self.median("dfs")
        return (dfs - self.median(strategy)) / dfs if dfs else 0.0

    def strategies(self) -> list[str]:
        return list(dict.fromkeys(r.strategy for r in self.rows))

    def summary(self) -> dict:
        out = {}
        for s in self.strategies():
            p = self.paths_for(s)
            row = {"median": self.median(s), "mean": float(np.mean(p)), "std": float(np.std(p)),
                   "not_found": sum(1 for r in self.rows if r.strategy == s and not r.found)}
            if any(r.strategy == "dfs" for r in self.rows):
                row["reduction_vs_dfs"] = self.reduction_vs_dfs(s)
            if s == "guided" and self.score_error is not None:
                row["score_error"] = self.score_error
            out[s] = row
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "sample", "repetition", "paths", "found"])
        for r in self.rows:
            w.writerow([r.strategy, r.sample, r.repetition, r.paths, int(r.found)])
        return buf.getvalue()


def run_benchmark(programs: Sequence[Program], strategies: Sequence[str] = STRATEGIES, budget: int = DEFAULT_BUDGET,
                  repetitions: int = 1, seed: int = 0, scorer: ScorerParams | None = None,
                  specs: SpecSet | None = None) -> StrategyResult:
    rows = []
    scored: list[DetectionRecord] = []
    for strategy in strategies:
        # deterministic strategies give the same answer on every repetition
        reps = repetitions if strategy == "random" else 1
        for i, prog in enumerate(programs):
            for rep in range(reps):
                opts = DetectOptions(budget=budget, strategy=strategy, scorer=scorer,
                                     seed=seed * 1_000_003 + i * 1009 + rep)
                rep_report = detect(prog, specs, opts, scored if strategy == "guided" else None)
                found = rep_report.verdict is Verdict.MALICIOUS
                rows.append(BenchRow(strategy, prog.name or f"sample{i}", rep,
                                     rep_report.paths_explored if found else budget, found))
    error = None
    if scored:
        error = float(np.mean([abs(r.omega - (r.label is Verdict.MALICIOUS)) for r in scored]))
    return StrategyResult(rows, budget, error)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney U / (n_pos * n_neg); None if a class is missing."""
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = average_ranks(scores)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(predictions: Sequence[int], labels: Sequence[int],
                    scores: Sequence[float] | None = None) -> Metrics:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    tn = int((~p & ~y).sum())
    fn = int((~p & y).sum())
    n = len(y)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = auc_roc(scores if scores is not None else p.astype(float), y)
    return Metrics((tp + tn) / n if n else 0.0, precision, recall, f1, auc, tp, fp, tn, fn)


def evaluate(programs: Sequence[Program], labels: Sequence[int], opts: DetectOptions | None = None,
             specs: SpecSet | None = None) -> tuple[Metrics, list[DetectionReport]]:
    reports = [detect(p, specs, opts) for p in programs]
    preds = [int(r.verdict is Verdict.MALICIOUS) for r in reports]
    scores = [r.detection.score if r.detection else 0.0 for r in reports]
    return compute_metrics(preds, labels, scores), reports


def labeled_paths(programs: Sequence[Program], max_paths: int = 256, specs: SpecSet | None = None,
                  benign_per_malicious: int | None = None, seed: int = 0) -> list[LabeledPath]:
    """Enumerate paths of each program and label each by whether its replay matches a spec.

    ``benign_per_malicious`` subsamples benign paths to at most that many per
    malicious path, program by program; None keeps them all.
    """
    specs = specs or builtin_specs()
    rng = random.Random(seed)
    out: list[LabeledPath] = []
    for prog in programs:
        pos, neg = [], []
        for rec in enumerate_path_constraints(prog, max_paths=max_paths):
            if rec.replay is None:
                continue
            bad = bool(classify_trace(rec.replay, specs))
            (pos if bad else neg).append(LabeledPath(rec.result.pi, rec.replay, prog, int(bad)))
        if benign_per_malicious is not None:
            keep = max(1, len(pos)) * benign_per_malicious
            if len(neg) > keep:
                neg = rng.sample(neg, keep)
        out += pos + neg
    return out


def write_reports(reports: Iterable[DetectionReport], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / f"{r.program or 'program'}.json").write_text(r.dumps())
