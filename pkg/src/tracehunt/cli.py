"""Command-line entry point.

Exit status: 0 on success, 1 when ``detect`` finds a malicious path, 2 on
any error (bad flags, missing files, malformed inputs).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import corpus as corpus_mod
from .classifier import EncoderParams, ModelConfig, TrainConfig, Verdict, train
from .logic import SpecSet, builtin_specs, parse_specs
from .oracle import RemoteConfig, ScorerParams, prior_params
from .pipeline import STRATEGIES, DetectOptions, detect, labeled_paths, run_benchmark
from .refine import policy_update, read_history, write_history
from .signatures import DbscanParams, MaliciousPath, Signature, match_signature, synthesize
from .solver import PathConstraint
from .vm import parse_program, run_concrete

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_DETECTED, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("tracehunt")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _load_program(path: str):
    program = parse_program(_read_text(path))
    if not program.name:
        program.meta["name"] = Path(path).stem
    return program


def _load_specs(path: str | None) -> SpecSet:
    return parse_specs(_read_text(path)) if path else builtin_specs()


def _load_scorer(path: str | None) -> ScorerParams:
    return ScorerParams.from_json(json.loads(_read_text(path))) if path else prior_params()


def _save_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pick(cls, table: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return dict(table)


# ---------------------------------------------------------------------------
# subcommands


def cmd_detect(args) -> int:
    program = _load_program(args.program)
    if args.oracle == "remote":
        if not args.endpoint:
            raise CliError("--oracle remote needs --endpoint")
        scorer = RemoteConfig(args.endpoint, model=args.model)
    else:
        scorer = _load_scorer(args.params)
    opts = DetectOptions(
        budget=args.budget, strategy=args.strategy, scorer=scorer,
        classifier=EncoderParams.load(args.classifier) if args.classifier else None,
        tau_thresh=args.tau, strict=args.strict, find_all=args.find_all, seed=args.seed, log_path=args.log,
    )
    history = [] if args.history else None
    report = detect(program, _load_specs(args.specs), opts, history)
    if args.history:
        write_history(args.history, history)
    text = report.dumps()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_DETECTED if report.verdict is Verdict.MALICIOUS else EXIT_OK


def cmd_corpus_gen(args) -> int:
    spec = corpus_mod.CorpusSpec.load(args.spec) if args.spec else corpus_mod.CorpusSpec()
    samples = corpus_mod.generate_corpus(spec)
    corpus_mod.write_corpus(samples, args.out, spec)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _read_samples(path: str):
    if not Path(path, "manifest.json").is_file():
        raise CliError(f"{path} is not a corpus directory (no manifest.json)")
    return corpus_mod.read_corpus(path)


def cmd_train(args) -> int:
    conf = tomllib.loads(_read_text(args.config)) if args.config else {}
    cfg = TrainConfig(**_pick(TrainConfig, conf.get("train", {})))
    model = ModelConfig(**{"dropout": cfg.dropout, **_pick(ModelConfig, conf.get("model", {}))})
    samples = _read_samples(args.corpus)
    data = labeled_paths([s.program for s in samples], max_paths=args.max_paths,
                         benign_per_malicious=args.balance, seed=cfg.seed)
    params = train(data, cfg, model)
    params.save(args.out)
    final = params.training_curve[-1] if params.training_curve else {}
    print(f"trained on {len(data)} paths; final {json.dumps(final, sort_keys=True)}")
    return EXIT_OK


def cmd_refine(args) -> int:
    params = _load_scorer(args.params)
    history = read_history(args.history)
    if not history:
        raise CliError(f"{args.history} holds no detection records")
    updated = policy_update(params, history, args.alpha)
    _save_json(args.out or args.params, updated.to_json())
    return EXIT_OK


def cmd_bench(args) -> int:
    samples = [s for s in _read_samples(args.corpus) if s.malicious]
    strategies = args.strategies or list(STRATEGIES)
    result = run_benchmark([s.program for s in samples], strategies, args.budget, args.repetitions, args.seed,
                           scorer=_load_scorer(args.params))
    if args.csv:
        Path(args.csv).write_text(result.to_csv())
    print(json.dumps(result.summary(), indent=2, sort_keys=True))
    return EXIT_OK


def _path_from_report(report_file: Path, programs_dir: Path) -> MaliciousPath | None:
    rep = json.loads(report_file.read_text())
    if rep.get("verdict") != Verdict.MALICIOUS.value:
        return None
    src = programs_dir / f"{rep['program']}.asm"
    program = _load_program(str(src))
    pi = PathConstraint.from_json(rep["constraint"])
    trace = run_concrete(program, bytes.fromhex(rep["witness"]))
    return MaliciousPath(pi, trace, program)


def cmd_sign_synth(args) -> int:
    det_dir = Path(args.detections)
    if not det_dir.is_dir():
        raise CliError(f"{det_dir} is not a directory")
    programs_dir = Path(args.programs) if args.programs else det_dir
    paths = [p for f in sorted(det_dir.glob("*.json")) if (p := _path_from_report(f, programs_dir))]
    if not paths:
        raise CliError(f"no MALICIOUS reports in {det_dir}")
    syn = synthesize(paths, DbscanParams(args.eps, args.min_pts))
    syn.signature.save(args.out)
    print(f"{len(syn.signature.entries)} signature entries from {len(paths)} paths")
    return EXIT_OK


def cmd_sign_match(args) -> int:
    sig = Signature.load(args.sig)
    program = _load_program(args.program)
    report = detect(program, opts=DetectOptions(budget=args.budget, find_all=True))
    for det in report.all_detections:
        entry = match_signature(sig, det.pi, run_concrete(program, det.witness))
        if entry is not None:
            print(json.dumps({"program": program.name, "matched": True, "pi": det.pi.text(),
                              "entry": entry.to_json()}, sort_keys=True))
            return EXIT_DETECTED
    print(json.dumps({"program": program.name, "matched": False}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tracehunt", description="Concolic malware detection on a toy VM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("detect", help="explore a program and report the first verified malicious path")
    d.add_argument("program")
    d.add_argument("--budget", type=int, default=1000)
    d.add_argument("--strategy", choices=STRATEGIES, default="guided")
    d.add_argument("--specs", help="named-formula file (default: built-in specs)")
    d.add_argument("--oracle", choices=("heuristic", "remote"), default="heuristic")
    d.add_argument("--params", help="heuristic scorer parameters (JSON)")
    d.add_argument("--endpoint", help="remote scorer URL")
    d.add_argument("--model", default="default", help="remote model name")
    d.add_argument("--classifier", help="classifier checkpoint; default classifies by spec match")
    d.add_argument("--tau", type=float, default=0.5)
    d.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True)
    d.add_argument("--find-all", action="store_true", help="exhaust the budget and report every detection")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--log", help="JSON-lines exploration log")
    d.add_argument("--history", help="write scored-path records for refine (JSONL)")
    d.add_argument("--report", help="write the JSON report here instead of stdout")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("corpus", help="synthetic corpus tools")
    csub = c.add_subparsers(dest="corpus_command", required=True, parser_class=_Parser)
    g = csub.add_parser("gen", help="generate a labeled corpus")
    g.add_argument("--spec", help="corpus TOML")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_corpus_gen)

    t = sub.add_parser("train", help="train the path classifier")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="TOML with [train] and [model] tables")
    t.add_argument("--out", required=True)
    t.add_argument("--max-paths", type=int, default=256)
    t.add_argument("--balance", type=int, default=None, help="max benign paths per malicious path")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="one policy-gradient update of the heuristic scorer")
    r.add_argument("--history", required=True)
    r.add_argument("--params", help="current parameters (default: prior)")
    r.add_argument("--alpha", type=float, required=True)
    r.add_argument("--out", help="output file (default: overwrite --params)")
    r.set_defaults(func=cmd_refine)

    b = sub.add_parser("bench", help="compare exploration strategies")
    b.add_argument("--corpus", required=True)
    b.add_argument("--strategies", nargs="+", choices=STRATEGIES)
    b.add_argument("--budget", type=int, default=1000)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--params", help="heuristic scorer parameters for guided")
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sign", help="behavioral signatures")
    ssub = s.add_subparsers(dest="sign_command", required=True, parser_class=_Parser)
    sy = ssub.add_parser("synth", help="synthesize signatures from detection reports")
    sy.add_argument("--detections", required=True, help="directory of detect reports")
    sy.add_argument("--programs", help="directory of the reported programs (default: --detections)")
    sy.add_argument("--eps", type=float, default=2.0)
    sy.add_argument("--min-pts", type=int, default=3)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_sign_synth)
    sm = ssub.add_parser("match", help="match a program against a signature file")
    sm.add_argument("--sig", required=True)
    sm.add_argument("--budget", type=int, default=1000)
    sm.add_argument("program")
    sm.set_defaults(func=cmd_sign_match)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "refine" and not (args.out or args.params):
            raise CliError("refine needs --out when --params is not given")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"tracehunt: error: {exc}", file=sys.stderr)
    except (ValueError, KeyError, OSError) as exc:
        print(f"tracehunt: error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
