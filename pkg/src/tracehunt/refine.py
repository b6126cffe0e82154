"""REINFORCE refinement of the heuristic path scorer.

The scorer is read as a Bernoulli policy over the action "prioritize this
path" with probability ``p = logistic(w.f + b)``.  Each detection record
contributes ``r * grad log p`` to the ascent direction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .classifier import Verdict
from .oracle import PathContext, ScorerParams, logistic

MALICIOUS_SLOPE = 1.0
BENIGN_SLOPE = -0.1


@dataclass(frozen=True)
class DetectionRecord:
    context: PathContext
    label: Verdict
    omega: float

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega {self.omega} outside [0, 1]")
        object.__setattr__(self, "label", Verdict(self.label))

    def to_json(self) -> dict:
        return {"context": self.context.to_json(), "label": self.label.value, "omega": self.omega}

    @classmethod
    def from_json(cls, d: dict) -> "DetectionRecord":
        return cls(PathContext.from_json(d["context"]), Verdict(d["label"]), float(d["omega"]))


History = Sequence[DetectionRecord]


def reward(label: Verdict, omega: float) -> float:
    return (MALICIOUS_SLOPE if label is Verdict.MALICIOUS else BENIGN_SLOPE) * omega


def compute_rewards(history: History) -> np.ndarray:
    return np.array([reward(r.label, r.omega) for r in history], dtype=float)


def _design(history: History, dim: int) -> np.ndarray:
    x = np.ones((len(history), dim + 1))
    for i, rec in enumerate(history):
        f = rec.context.feature_array()
        if f.shape != (dim,):
            raise ValueError(f"record {i} has {f.shape[0]} features, scorer expects {dim}")
        x[i, :dim] = f
    return x


def log_likelihood(theta: np.ndarray, ctx: PathContext) -> float:
    """log p(prioritize | ctx; theta), theta = [weights, bias]."""
    z = float(np.dot(theta[:-1], ctx.feature_array()) + theta[-1])
    return -float(np.logaddexp(0.0, -z))


def grad_log_likelihood(theta: np.ndarray, ctx: PathContext) -> np.ndarray:
    x = np.append(ctx.feature_array(), 1.0)
    return (1.0 - logistic(float(np.dot(theta, x)))) * x


def policy_gradient(params: ScorerParams, history: History) -> np.ndarray:
    if not history:
        raise ValueError("policy update needs at least one record")
    theta = params.theta
    x = _design(history, len(params.weights))
    r = compute_rewards(history)
    z = x @ theta
    one_minus_p = 1.0 - np.array([logistic(float(v)) for v in z])
    return (r * one_minus_p) @ x / len(history)


def policy_update(params: ScorerParams, history: History, alpha: float) -> ScorerParams:
    """One ascent step ``theta + alpha * grad J``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return ScorerParams.from_theta(params.theta + alpha * policy_gradient(params, history))


def write_history(path: str | Path, history: Iterable[DetectionRecord], extra: Iterable[dict] | None = None) -> None:
    extras = list(extra) if extra is not None else None
    with open(path, "w") as fh:
        for i, rec in enumerate(history):
            row = {"index": i, **rec.to_json()}
            if extras is not None:
                row.update(extras[i])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_history(path: str | Path) -> list[DetectionRecord]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    rows.sort(key=lambda d: d.get("index", 0))
    return [DetectionRecord.from_json(d) for d in rows]
