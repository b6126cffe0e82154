"""Concolic malware detection on a small register VM.

Paths are explored in priority order, solved to concrete witnesses, replayed,
and checked against temporal behaviour specifications.
"""
from .classifier import Verdict
from .logic import builtin_specs, classify_trace, parse_formula, parse_specs
from .pipeline import DetectOptions, DetectionReport, compute_metrics, detect, run_benchmark
from .vm import parse_program, run_concrete

__version__ = "0.1.0"

__all__ = [
    "DetectOptions", "DetectionReport", "Verdict", "builtin_specs", "classify_trace", "compute_metrics", "detect",
    "parse_formula", "parse_program", "parse_specs", "run_benchmark", "run_concrete",
]
