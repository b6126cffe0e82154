"""Signature synthesis from detected malicious paths, and matching against it.

Paths are embedded (standardized feature vectors), clustered with DBSCAN, and
each cluster yields one entry: the clauses every member entails, plus a
temporal formula mined from a small template family that every member trace
satisfies.  A new path matches an entry when its constraint entails the
entry's constraint and its trace satisfies the entry's formula.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features, kernels
from .logic import (
    And, Atom, Eventually, Formula, Globally, Not, atom_holds, atom_vocabulary, free_vars, holds,
    parse_formula, positions, to_text,
)
from .solver import Budget, PathConstraint, entails, to_text as expr_text
from .vm import Program, Trace

SIGNATURE_VERSION = 1
NOISE = -1
MAX_CONJUNCTS = 3


@dataclass(frozen=True)
class MaliciousPath:
    pi: PathConstraint
    trace: Trace
    program: Program

    def features(self) -> np.ndarray:
        return features.extract(self.pi, self.trace, self.program)


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 2.0
    min_pts: int = 3

    def __post_init__(self):
        if self.eps <= 0 or self.min_pts < 1:
            raise ValueError("eps must be > 0 and min_pts >= 1")


# ---------------------------------------------------------------------------
# embedding and clustering


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-column z-score; constant columns map to 0."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(0)
    sd = x.std(0)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (x - mu) / safe, 0.0)


def embed_paths(paths: Sequence[MaliciousPath]) -> np.ndarray:
    return standardize(features.stack(p.features() for p in paths))


def dbscan(points: np.ndarray, params: DbscanParams = DbscanParams()) -> np.ndarray:
    """Cluster label per point (0, 1, ... in discovery order) or ``NOISE``.

    Points are scanned in index order; a border point reachable from several
    clusters stays with the first (lowest id) cluster that reaches it.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("need a non-empty 2-D point array")
    nbr = kernels.neighbor_matrix(pts, params.eps)
    neighbours = [np.flatnonzero(row) for row in nbr]
    core = np.array([len(nb) >= params.min_pts for nb in neighbours])
    labels = np.full(len(pts), NOISE, dtype=np.int64)
    visited = np.zeros(len(pts), dtype=bool)
    cluster = 0
    for i in range(len(pts)):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        frontier = [i]
        while frontier:
            j = frontier.pop()
            for k in neighbours[j]:
                if labels[k] == NOISE:
                    labels[k] = cluster
                if core[k] and not visited[k]:
                    visited[k] = True
                    frontier.append(k)
        cluster += 1
    return labels


def clusters_of(labels: np.ndarray) -> list[list[int]]:
    k = int(labels.max()) + 1 if len(labels) else 0
    return [np.flatnonzero(labels == c).tolist() for c in range(k)]


# ---------------------------------------------------------------------------
# generalization


def generalize_constraints(cluster: Sequence[PathConstraint], budget: Budget | None = None) -> PathConstraint:
    """Conjunction of member clauses that every member entails (undecided -> dropped)."""
    if not cluster:
        raise ValueError("empty cluster")
    seen: dict[str, object] = {}
    for pi in cluster:
        for c in pi.clauses:
            seen.setdefault(expr_text(c), c)
    kept = []
    for c in seen.values():
        single = PathConstraint.of(c)
        if all(c in pi.clauses or entails(pi, single, budget) is True for pi in cluster):
            kept.append(c)
    return PathConstraint(tuple(kept))


# ---------------------------------------------------------------------------
# temporal-spec mining


def _conjoin(fs: Sequence[Formula]) -> Formula:
    if not fs:
        return Atom("true")
    out = fs[0]
    for f in fs[1:]:
        out = And(out, f)
    return out


def candidate_templates(vocab: Sequence[Atom] | None = None) -> list[tuple[Formula, tuple]]:
    """Template instances, most specific first, with the atom indices they use."""
    vocab = list(vocab or atom_vocabulary())
    out: list[tuple[Formula, tuple]] = []
    for i, a in enumerate(vocab):
        for j, b in enumerate(vocab):
            if i != j:
                out.append((Eventually(And(a, Eventually(b))), ("seq", i, j)))
    out += [(Eventually(a), ("ev", i)) for i, a in enumerate(vocab)]
    out += [(Globally(Not(a)), ("never", i)) for i, a in enumerate(vocab)]
    return out


def _template_truth(trace: Trace, vocab: Sequence[Atom]) -> dict[tuple, bool]:
    pos = positions(trace)
    table = np.array([[atom_holds(a, p, {}) for p in pos] for a in vocab], dtype=bool)
    # later[j, t]: atom j holds at some position >= t
    later = np.flip(np.logical_or.accumulate(np.flip(table, 1), 1), 1)
    seq = (table.astype(np.int64) @ later.T.astype(np.int64)) > 0
    out: dict[tuple, bool] = {}
    for i in range(len(vocab)):
        out[("ev", i)] = bool(table[i].any())
        out[("never", i)] = not bool(table[i].any())
        for j in range(len(vocab)):
            out[("seq", i, j)] = bool(seq[i, j])
    return out


def infer_ltl(traces: Sequence[Trace], vocab: Sequence[Atom] | None = None, top: int = MAX_CONJUNCTS) -> Formula:
    """Conjunction of the ``top`` most specific templates every trace satisfies."""
    if not traces:
        raise ValueError("no traces to mine")
    vocab = list(vocab or atom_vocabulary())
    truths = [_template_truth(t, vocab) for t in traces]
    chosen = [f for f, key in candidate_templates(vocab) if all(tt[key] for tt in truths)]
    return _conjoin(chosen[:top])


# ---------------------------------------------------------------------------
# signatures


@dataclass(frozen=True)
class SignatureEntry:
    pi_gen: PathConstraint
    phi: Formula
    member_count: int

    def to_json(self) -> dict:
        return {"pi_gen": self.pi_gen.to_json(), "pi_text": self.pi_gen.text(), "phi": to_text(self.phi),
                "members": self.member_count}

    @classmethod
    def from_json(cls, d: dict) -> "SignatureEntry":
        return cls(PathConstraint.from_json(d["pi_gen"]), parse_formula(d["phi"]), int(d["members"]))


@dataclass(frozen=True)
class Signature:
    entries: tuple[SignatureEntry, ...]
    params: DbscanParams = DbscanParams()
    vocab_hash: str = features.VOCAB_HASH
    meta: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for e in self.entries:
            if free_vars(e.phi):
                raise ValueError("signature formulas must be closed")

    def to_json(self) -> dict:
        return {
            "version": SIGNATURE_VERSION,
            "vocab_hash": self.vocab_hash,
            "params": {"eps": self.params.eps, "min_pts": self.params.min_pts},
            "meta": dict(self.meta),
            "entries": [e.to_json() for e in self.entries],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Signature":
        if d.get("version") != SIGNATURE_VERSION:
            raise ValueError(f"unsupported signature version {d.get('version')}")
        return cls(
            tuple(SignatureEntry.from_json(e) for e in d["entries"]),
            DbscanParams(**d["params"]), d["vocab_hash"], tuple(sorted(d.get("meta", {}).items())),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Signature":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Synthesis:
    signature: Signature
    labels: np.ndarray
    embeddings: np.ndarray


def synthesize(paths: Sequence[MaliciousPath], params: DbscanParams = DbscanParams(),
               budget: Budget | None = None) -> Synthesis:
    if not paths:
        raise ValueError("no malicious paths to synthesize from")
    emb = embed_paths(paths)
    labels = dbscan(emb, params)
    entries = []
    for members in clusters_of(labels):
        pi_gen = generalize_constraints([paths[i].pi for i in members], budget)
        phi = infer_ltl([paths[i].trace for i in members])
        entries.append(SignatureEntry(pi_gen, phi, len(members)))
    meta = (("paths", str(len(paths))), ("noise", str(int((labels == NOISE).sum()))))
    return Synthesis(Signature(tuple(entries), params, features.VOCAB_HASH, meta), labels, emb)


def match_signature(sig: Signature, pi: PathConstraint, trace: Trace,
                    budget: Budget | None = None) -> SignatureEntry | None:
    if sig.vocab_hash != features.VOCAB_HASH:
        raise features.LayoutMismatch("signature was built with a different feature vocabulary")
    for entry in sig.entries:
        if entails(pi, entry.pi_gen, budget) is True and holds(trace, entry.phi):
            return entry
    return None
