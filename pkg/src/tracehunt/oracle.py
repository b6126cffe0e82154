"""Path priority scoring.

Two backends produce a score in [0, 1] for a pending path:

* a logistic heuristic over the feature vector, which is deterministic and
  differentiable and is the policy that ``refine`` trains;
* a remote text-completion endpoint fed a fixed prompt, for offline comparison.
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import features
from .concolic import ForkCandidate
from .solver import PathConstraint
from .vm import Opcode, Program, SyscallKind, disassemble, trace_prefix, window_bounds

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Analyze the following symbolic execution path constraint and disassembly context. "
    "Rate the likelihood (0.0-1.0) that this path leads to malicious behavior:\n\n"
    "Path Constraint: {constraint}\n"
    "Disassembly: {disasm}\n"
    "Maliciousness Score: "
)

DEFAULT_WINDOW = 16
PRIOR_SYSCALLS = (SyscallKind.SEND, SyscallKind.SETUID, SyscallKind.MPROTECT, SyscallKind.WRITE_FILE)


@dataclass(frozen=True)
class PathContext:
    constraint_text: str
    disasm_text: str
    features: tuple[float, ...]

    def prompt(self) -> str:
        return PROMPT_TEMPLATE.format(constraint=self.constraint_text, disasm=self.disasm_text)

    def feature_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=float)

    def to_json(self) -> dict:
        return {"constraint": self.constraint_text, "disasm": self.disasm_text, "features": list(self.features)}

    @classmethod
    def from_json(cls, d: dict) -> "PathContext":
        return cls(d["constraint"], d["disasm"], tuple(float(x) for x in d["features"]))


def encode_context(pi: PathConstraint, disasm: str, feats: Sequence[float]) -> PathContext:
    return PathContext(pi.text(), disasm, tuple(float(x) for x in feats))


# ---------------------------------------------------------------------------
# heuristic scorer


@dataclass(frozen=True)
class ScorerParams:
    weights: tuple[float, ...]
    bias: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if not all(math.isfinite(x) for x in w + (self.bias,)):
            raise ValueError("scorer parameters must be finite")

    @property
    def theta(self) -> np.ndarray:
        """Weights followed by the bias."""
        return np.array(self.weights + (self.bias,))

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> "ScorerParams":
        theta = np.asarray(theta, dtype=float)
        return cls(tuple(theta[:-1].tolist()), float(theta[-1]))

    @classmethod
    def zeros(cls, dim: int = features.DIM) -> "ScorerParams":
        return cls((0.0,) * dim, 0.0)

    def to_json(self) -> dict:
        return {"vocab_hash": features.VOCAB_HASH, "weights": list(self.weights), "bias": self.bias}

    @classmethod
    def from_json(cls, d: dict) -> "ScorerParams":
        if d.get("vocab_hash", features.VOCAB_HASH) != features.VOCAB_HASH:
            raise features.LayoutMismatch("scorer parameters were saved for a different feature layout")
        return cls(tuple(d["weights"]), d["bias"])


def prior_params() -> ScorerParams:
    """Weakly informed start: +1 on four syscall slots, bias -1."""
    w = np.zeros(features.DIM)
    for kind in PRIOR_SYSCALLS:
        w[features.syscall_slot(kind)] = 1.0
    return ScorerParams(tuple(w.tolist()), -1.0)


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def score_features(x: np.ndarray, params: ScorerParams) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (len(params.weights),):
        raise ValueError(f"feature dimension {x.shape} does not match {len(params.weights)} weights")
    return logistic(float(np.dot(params.weights, x)) + params.bias)


def score_heuristic(ctx: PathContext, params: ScorerParams) -> float:
    return score_features(ctx.feature_array(), params)


def window_syscall_bag(program: Program, center: int, window: int = DEFAULT_WINDOW) -> np.ndarray:
    start, stop = window_bounds(program, center, window)
    bag = np.zeros(len(features.SYSCALL_NAMES))
    for ins in program.instructions[start:stop]:
        if ins.op is Opcode.SYSCALL:
            bag[features.syscall_slot(ins.kind) - features.SYSCALL_SLICE.start] += 1
    return bag


def fork_context(cand: ForkCandidate, window: int = DEFAULT_WINDOW) -> PathContext:
    """Context of a pending path: its constraint, the parent's run up to the
    fork, and the code the flipped branch leads to."""
    prefix = trace_prefix(cand.parent_trace, cand.record.step)
    f = features.extract(cand.pi, prefix, cand.program)
    f[features.SYSCALL_SLICE] += window_syscall_bag(cand.program, cand.target, window)
    return encode_context(cand.pi, disassemble(cand.program, cand.target, window), f)


# ---------------------------------------------------------------------------
# remote scorer


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    model: str = "default"
    temperature: float = 0.1
    max_tokens: int = 10
    timeout: float = 10.0
    retries: int = 2
    fallback: float = 0.5
    api_key_env: str = "TRACEHUNT_API_KEY"
    max_in_flight: int = 4
    extra_headers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 <= self.fallback <= 1.0:
            raise ValueError("fallback must lie in [0, 1]")
        if self.retries < 0 or self.max_in_flight < 1:
            raise ValueError("retries must be >= 0 and max_in_flight >= 1")


_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)")


def parse_score(text: str) -> float | None:
    """First decimal number in ``text``, clamped to [0, 1]."""
    m = _NUMBER_RE.search(text)
    if not m:
        return None
    return min(1.0, max(0.0, float(m.group(0))))


def _request(ctx: PathContext, cfg: RemoteConfig) -> str:
    body = json.dumps({
        "model": cfg.model, "prompt": ctx.prompt(), "temperature": cfg.temperature, "max_tokens": cfg.max_tokens,
    }).encode()
    headers = {"Content-Type": "application/json", **cfg.extra_headers}
    key = os.environ.get(cfg.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    req = urllib.request.Request(cfg.endpoint, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
        payload = json.loads(resp.read().decode())
    return str(payload["text"])


def score_remote(ctx: PathContext, cfg: RemoteConfig) -> float:
    """Never raises: on repeated failure the configured fallback is returned."""
    last_err: Exception | str = "no attempt"
    for _ in range(cfg.retries + 1):
        try:
            text = _request(ctx, cfg)
        except (OSError, urllib.error.URLError, ValueError, KeyError, TimeoutError) as exc:
            last_err = exc
            continue
        score = parse_score(text)
        if score is not None:
            return score
        last_err = f"non-numeric reply {text!r}"
    log.warning("remote scoring failed (%s); using fallback %.2f", last_err, cfg.fallback)
    return cfg.fallback


def score_remote_many(ctxs: Sequence[PathContext], cfg: RemoteConfig) -> list[float]:
    """Concurrent scoring; results come back in input order."""
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(lambda c: score_remote(c, cfg), ctxs))
