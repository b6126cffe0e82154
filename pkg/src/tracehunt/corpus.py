"""Seeded generator for labeled VM programs.

A malicious sample reads its input bytes up front, runs a chain of trigger
guards (one of them driven by the TIME syscall), and only when every guard
passes reaches a short payload showing one behavior (exfil, privesc, persist
or poly).  Failing any guard leads to a decoy region: a chain of independent
input-dependent diamonds that multiplies the number of feasible paths.

Benign samples have the same shape with a look-alike payload (a temp-file
read sent over a socket, a log write, a no-op setuid, an RW mprotect of the
data region).

Polymorphic variants rewrite a base sample with register renaming, swaps of
adjacent independent instructions and dead-register junk.
"""
from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .concolic import enumerate_path_constraints
from .logic import builtin_specs, classify_trace
from .solver import Binary, BranchSite, Cmp, Const, PathConstraint, SymByte, check_sat, mk_not
from .vm import Opcode, Program, parse_program, pretty_print, run_concrete

BEHAVIORS = ("exfil", "privesc", "persist", "poly")
CORPUS_VERSION = 1
MAX_RETRIES = 20
MAX_TRIGGER_DEPTH = 4

# ---------------------------------------------------------------------------
# specification


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    samples: int = 100
    benign_fraction: float = 0.5
    behavior_mix: dict = field(default_factory=lambda: {b: 1.0 for b in BEHAVIORS})
    trigger_depth: int = 3
    variants: int = 0  # extra polymorphic variants per malicious base sample
    decoys: int = 5
    loops: bool = True

    def __post_init__(self):
        if self.samples < 0 or self.trigger_depth < 0 or self.variants < 0 or self.decoys < 0:
            raise ValueError("counts must be non-negative")
        if self.trigger_depth > MAX_TRIGGER_DEPTH:
            raise ValueError(f"trigger_depth is limited to {MAX_TRIGGER_DEPTH}")
        if not 0.0 <= self.benign_fraction <= 1.0:
            raise ValueError("benign_fraction must lie in [0, 1]")
        unknown = set(self.behavior_mix) - set(BEHAVIORS)
        if unknown:
            raise ValueError(f"unknown behaviors {sorted(unknown)}")
        if any(w < 0 for w in self.behavior_mix.values()) or sum(self.behavior_mix.values()) <= 0:
            raise ValueError("behavior_mix needs non-negative weights with a positive sum")

    @property
    def n_benign(self) -> int:
        return round(self.samples * self.benign_fraction)

    @property
    def n_malicious(self) -> int:
        return self.samples - self.n_benign

    @classmethod
    def from_toml(cls, text: str) -> "CorpusSpec":
        data = tomllib.loads(text)
        data = data.get("corpus", data)
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusSpec":
        return cls.from_toml(Path(path).read_text())


@dataclass(frozen=True)
class Sample:
    name: str
    program: Program
    malicious: bool
    behavior: str  # behavior or look-alike kind
    family: str  # base sample name shared by its variants
    trigger: PathConstraint  # guard clauses; their conjunction reaches the payload
    witness: bytes  # one input satisfying the trigger
    guard_sites: tuple[int, ...] = ()
    n_inputs: int = 0

    @property
    def label(self) -> int:
        return int(self.malicious)

    def manifest_entry(self) -> dict:
        return {
            "name": self.name, "file": f"{self.name}.asm", "label": self.label, "behavior": self.behavior,
            "family": self.family, "trigger": self.trigger.to_json(), "witness": self.witness.hex(),
            "guard_sites": list(self.guard_sites), "inputs": self.n_inputs,
        }


# ---------------------------------------------------------------------------
# program skeletons
#
# Code is built as a list of lines: ("label", name) or ("ins", text, defs, uses)
# where defs/uses are register numbers; the metadata lets variants reorder and
# rename safely.  "fixed" instructions (control flow, I/O, memory, syscalls)
# are never moved.

Line = tuple


def _ins(text: str, defs: Sequence[int] = (), uses: Sequence[int] = (), movable: bool = False) -> Line:
    return ("ins", text, tuple(defs), tuple(uses), movable)


def _label(name: str) -> Line:
    return ("label", name)


_PAYLOADS = {
    "exfil": lambda r: [
        _ins("SYSCALL READ_FILE, SENSITIVE_DOC"),
        _ins(f"SYSCALL SOCKET, r{r[5]}", defs=[r[5]]),
        _ins(f"SYSCALL SEND, r{r[5]}, r{r[0]}", uses=[r[5], r[0]]),
    ],
    "privesc": lambda r: [
        _ins(f"CONST r{r[5]}, 0", defs=[r[5]], movable=True),
        _ins(f"SYSCALL SETUID, r{r[5]}", uses=[r[5]]),
    ],
    "persist": lambda r: [_ins("SYSCALL WRITE_FILE, CRON")],
    "persist_systemd": lambda r: [_ins("SYSCALL WRITE_FILE, SYSTEMD")],
    "poly": lambda r: [
        _ins("SYSCALL MPROTECT, TEXT_SECTION, RWX"),
        _ins(f"CONST r{r[5]}, 4096", defs=[r[5]], movable=True),
        _ins(f"STORE r{r[5]}, 16, r{r[0]}", uses=[r[5], r[0]]),
    ],
}

_LOOKALIKES = {
    "exfil": lambda r: [
        _ins("SYSCALL READ_FILE, TMP"),
        _ins(f"SYSCALL SOCKET, r{r[5]}", defs=[r[5]]),
        _ins(f"SYSCALL SEND, r{r[5]}, r{r[0]}", uses=[r[5], r[0]]),
    ],
    "privesc": lambda r: [
        _ins(f"SYSCALL GETUID, r{r[5]}", defs=[r[5]]),
        _ins(f"SYSCALL SETUID, r{r[5]}", uses=[r[5]]),
    ],
    "persist": lambda r: [_ins("SYSCALL WRITE_FILE, LOG")],
    "poly": lambda r: [
        _ins("SYSCALL MPROTECT, DATA, RW"),
        _ins(f"CONST r{r[5]}, 8192", defs=[r[5]], movable=True),
        _ins(f"STORE r{r[5]}, 16, r{r[0]}", uses=[r[5], r[0]]),
    ],
}


@dataclass
class _Guard:
    lines: list
    clause_taken: object  # clause that holds when the guard *passes*


def _guard(rng: random.Random, kind: str, reg: int, byte: int, scratch: int) -> _Guard:
    """A guard that jumps to ``decoy`` unless the trigger condition holds."""
    b = SymByte(byte)
    if kind == "eq":
        c = rng.randint(1, 255)
        return _Guard([_ins(f"BR.ne r{reg}, {c}, decoy", uses=[reg])], Cmp("eq", b, Const(c)))
    if kind == "range":
        c = rng.randint(128, 250)
        # pass when byte >= c
        return _Guard([_ins(f"BR.ult r{reg}, {c}, decoy", uses=[reg])], mk_not(Cmp("ult", b, Const(c))))
    if kind == "mask":
        c = rng.randint(1, 15)
        return _Guard(
            [_ins(f"AND r{scratch}, r{reg}, 15", defs=[scratch], uses=[reg], movable=True),
             _ins(f"BR.ne r{scratch}, {c}, decoy", uses=[scratch])],
            Cmp("eq", Binary("and", b, Const(15)), Const(c)),
        )
    if kind == "time":
        c = rng.randint(8, 64)
        # a small clock reading stands in for "not in a sandbox"; pass when t < c
        return _Guard([_ins(f"BR.uge r{reg}, {c}, decoy", uses=[reg])], mk_not(Cmp("ule", Const(c), b)))
    raise ValueError(kind)


# register roles: r0..r3 guard bytes, r4 decoy bytes, r5 payload/address,
# r6 scratch/accumulator, r7 left free for junk in variants
DECOY_REG, PAYLOAD_REG, SCRATCH_REG = 4, 5, 6


def _decoys(rng: random.Random, n: int, loops: bool) -> list:
    """Independent diamonds, each on a fresh input byte; no syscalls."""
    r, acc, addr = DECOY_REG, SCRATCH_REG, PAYLOAD_REG
    out: list = [_label("decoy"), _ins(f"CONST r{acc}, {rng.randint(0, 9)}", defs=[acc], movable=True)]
    for i in range(n):
        c = rng.randint(1, 254)
        cmp = rng.choice(["eq", "ult", "ugt", "ne"])
        out += [
            _ins(f"INPUT r{r}", defs=[r]),
            _ins(f"BR.{cmp} r{r}, {c}, d{i}_then", uses=[r]),
            _ins(f"ADD r{acc}, r{acc}, {rng.randint(1, 9)}", defs=[acc], uses=[acc]),
            _ins(f"JMP d{i}_join"),
            _label(f"d{i}_then"),
            _ins(f"XOR r{acc}, r{acc}, {rng.randint(1, 255)}", defs=[acc], uses=[acc]),
            _label(f"d{i}_join"),
        ]
    if loops:
        out += [
            _ins(f"CONST r{r}, 0", defs=[r]),
            _label("spin"),
            _ins(f"ADD r{r}, r{r}, 1", defs=[r], uses=[r]),
            _ins(f"BR.ult r{r}, {rng.randint(2, 4)}, spin", uses=[r]),
        ]
    out += [
        _ins(f"CONST r{addr}, 8192", defs=[addr]),
        _ins(f"STORE r{addr}, 0, r{acc}", uses=[addr, acc]),
        _ins("HALT"),
    ]
    return out


@dataclass
class _Skeleton:
    lines: list
    meta: dict
    trigger: PathConstraint
    n_inputs: int


def _skeleton(rng: random.Random, behavior: str, malicious: bool, depth: int, n_decoys: int, loops: bool) -> _Skeleton:
    kinds = ["eq"] + [rng.choice(["eq", "range", "mask"]) for _ in range(max(0, depth - 2))]
    if depth >= 2:
        kinds.append("time")
    kinds = kinds[:depth]
    lines: list = [_label("entry")]
    for reg, kind in enumerate(kinds):
        lines.append(_ins(f"SYSCALL TIME, r{reg}" if kind == "time" else f"INPUT r{reg}", defs=[reg]))
    clauses = []
    for i, kind in enumerate(kinds):
        g = _guard(rng, kind, i, i, SCRATCH_REG)
        lines.append(_label(f"guard{i}"))
        lines += g.lines
        clauses.append(g.clause_taken)
    lines.append(_label("payload"))
    key = behavior
    if malicious and behavior == "persist" and rng.random() < 0.5:
        key = "persist_systemd"
    regs = [0, 1, 2, 3, DECOY_REG, PAYLOAD_REG, SCRATCH_REG, 7]
    lines += (_PAYLOADS if malicious else _LOOKALIKES)[key](regs)
    # padding keeps the decoy region out of the payload's disassembly window
    lines += [_ins("HALT") for _ in range(rng.randint(9, 11))]
    lines += _decoys(rng, n_decoys, loops)
    n_inputs = depth + n_decoys
    meta = {"label": "malicious" if malicious else "benign", "behavior": behavior, "inputs": str(n_inputs)}
    return _Skeleton(lines, meta, PathConstraint(tuple(clauses)), n_inputs)


def _render(lines: list, meta: dict) -> str:
    out = [f".meta {k} {v}" for k, v in meta.items()]
    for ln in lines:
        if ln[0] == "label":
            out.append(f"{ln[1]}:")
        else:
            out.append(f"    {ln[1]}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# polymorphic rewriting

_REG_TOKEN = re.compile(r"\br(\d)\b")


def _rename(lines: list, perm: list[int]) -> list:
    out = []
    for ln in lines:
        if ln[0] == "label":
            out.append(ln)
            continue
        _, text, defs, uses, movable = ln
        text = _REG_TOKEN.sub(lambda m: f"r{perm[int(m.group(1))]}", text)
        out.append(("ins", text, tuple(perm[d] for d in defs), tuple(perm[u] for u in uses), movable))
    return out


def _independent(a: Line, b: Line) -> bool:
    if a[0] != "ins" or b[0] != "ins" or not (a[4] and b[4]):
        return False
    da, ua, db, ub = set(a[2]), set(a[3]), set(b[2]), set(b[3])
    return not (da & ub or db & ua or da & db)


def _reorder(rng: random.Random, lines: list) -> list:
    out = list(lines)
    for i in range(len(out) - 1):
        if _independent(out[i], out[i + 1]) and rng.random() < 0.5:
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _junk(rng: random.Random, lines: list, count: int) -> list:
    used = {int(m) for ln in lines if ln[0] == "ins" for m in _REG_TOKEN.findall(ln[1])}
    free = [r for r in range(8) if r not in used]
    if not free:
        return lines
    j = free[0]
    out = list(lines)
    for _ in range(count):
        # never before the first instruction so ``entry`` keeps its meaning
        pos = rng.randint(2, len(out))
        op = rng.choice(["CONST", "ADD", "XOR", "MUL"])
        text = f"CONST r{j}, {rng.randint(0, 999)}" if op == "CONST" else f"{op} r{j}, r{j}, {rng.randint(1, 99)}"
        out.insert(pos, _ins(text, defs=[j], uses=[] if op == "CONST" else [j], movable=True))
    return out


def make_variant(rng: random.Random, lines: list) -> list:
    perm = list(range(8))
    rng.shuffle(perm)
    out = _junk(rng, _rename(lines, perm), rng.randint(2, 6))
    return _reorder(rng, out)


# ---------------------------------------------------------------------------
# verification


class VerificationError(RuntimeError):
    pass


def _trigger_sites(program: Program, n_guards: int) -> tuple[int, ...]:
    """Location of each guard's branch (the first BR at or after its label)."""
    sites = []
    for i in range(n_guards):
        loc = program.labels[f"guard{i}"]
        while program.instructions[loc].op is not Opcode.BR:
            loc += 1
        sites.append(loc)
    return tuple(sites)


def verify_malicious(program: Program, trigger: PathConstraint, behavior: str, n_inputs: int) -> bytes:
    """Solve the trigger, replay the model, and confirm the behavior fires only then."""
    specs = builtin_specs()
    res = check_sat(trigger)
    if not res.sat:
        raise VerificationError("trigger is unsatisfiable")
    witness = res.model.to_bytes(n_inputs)
    matched = classify_trace(run_concrete(program, witness), specs)
    if behavior not in matched:
        raise VerificationError(f"payload {behavior!r} not observed on the trigger witness (got {matched})")
    if len(trigger) and classify_trace(run_concrete(program, bytes(n_inputs)), specs):
        raise VerificationError("behavior fires without the trigger")
    return witness


def verify_benign(program: Program, max_paths: int = 4096) -> None:
    """Every feasible path (DFS until the frontier is empty) must match no spec."""
    specs = builtin_specs()
    records = enumerate_path_constraints(program, max_paths=max_paths)
    if len(records) >= max_paths:
        raise VerificationError("benign verification did not exhaust the path space")
    for rec in records:
        for trace in (rec.result.trace, rec.replay):
            if trace is not None and classify_trace(trace, specs):
                raise VerificationError(f"benign sample matches a spec on path {rec.result.pi.text()}")


# ---------------------------------------------------------------------------
# generation


def _build(rng: random.Random, name: str, behavior: str, malicious: bool, spec: CorpusSpec) -> tuple[Sample, list, dict]:
    for _ in range(MAX_RETRIES):
        sk = _skeleton(rng, behavior, malicious, spec.trigger_depth, spec.decoys, spec.loops)
        meta = {"name": name, **sk.meta}
        program = parse_program(_render(sk.lines, meta))
        try:
            witness = _verify(program, sk.trigger, behavior, malicious, sk.n_inputs)
        except VerificationError:
            continue
        sites = _trigger_sites(program, len(sk.trigger))
        trigger = PathConstraint(sk.trigger.clauses, tuple(BranchSite(s, False) for s in sites))
        return Sample(name, program, malicious, behavior, name, trigger, witness, sites, sk.n_inputs), sk.lines, meta
    raise VerificationError(f"could not generate a verified sample for {name}")


def _verify(program: Program, trigger: PathConstraint, behavior: str, malicious: bool, n_inputs: int) -> bytes:
    if malicious:
        return verify_malicious(program, trigger, behavior, n_inputs)
    verify_benign(program)
    res = check_sat(trigger)
    return res.model.to_bytes(n_inputs) if res.sat else bytes(n_inputs)


def variant_of(base: Sample, lines: list, meta: dict, rng: random.Random, name: str) -> Sample:
    for _ in range(MAX_RETRIES):
        vlines = make_variant(rng, lines)
        program = parse_program(_render(vlines, {**meta, "name": name, "variant_of": base.name}))
        try:
            witness = _verify(program, base.trigger, base.behavior, base.malicious, base.n_inputs)
        except VerificationError:
            continue
        sites = _trigger_sites(program, len(base.trigger))
        trigger = PathConstraint(base.trigger.clauses, tuple(BranchSite(s, False) for s in sites))
        return Sample(name, program, base.malicious, base.behavior, base.family, trigger, witness, sites, base.n_inputs)
    raise VerificationError(f"could not generate a verified variant {name}")


def _pick_behavior(rng: random.Random, mix: dict) -> str:
    names = [b for b in BEHAVIORS if mix.get(b, 0) > 0]
    return rng.choices(names, weights=[mix[b] for b in names])[0]


def generate_corpus(spec: CorpusSpec) -> list[Sample]:
    """Deterministic in ``spec.seed``; malicious bases are followed by their variants."""
    rng = random.Random(spec.seed)
    out: list[Sample] = []
    base_idx = 0
    while sum(s.malicious for s in out) < spec.n_malicious:
        behavior = _pick_behavior(rng, spec.behavior_mix)
        name = f"mal_{base_idx:04d}_{behavior}"
        base, lines, meta = _build(rng, name, behavior, True, spec)
        out.append(base)
        for v in range(spec.variants):
            if sum(s.malicious for s in out) >= spec.n_malicious:
                break
            out.append(variant_of(base, lines, meta, rng, f"{name}_v{v + 1}"))
        base_idx += 1
    for i in range(spec.n_benign):
        behavior = _pick_behavior(rng, spec.behavior_mix)
        sample, _, _ = _build(rng, f"ben_{i:04d}_{behavior}", behavior, False, spec)
        out.append(sample)
    return out


def fresh_variants(base: Sample, spec: CorpusSpec, count: int, seed: int) -> list[Sample]:
    """New variants of a previously generated base sample (same trigger and payload)."""
    lines, meta = _source_lines(base, spec)
    vrng = random.Random(seed)
    return [variant_of(base, lines, meta, vrng, f"{base.name}_f{seed}_{k}") for k in range(count)]


def _source_lines(base: Sample, spec: CorpusSpec) -> tuple[list, dict]:
    rng = random.Random(spec.seed)
    base_idx = 0
    produced = 0
    while produced < spec.n_malicious:
        behavior = _pick_behavior(rng, spec.behavior_mix)
        name = f"mal_{base_idx:04d}_{behavior}"
        sample, lines, meta = _build(rng, name, behavior, True, spec)
        produced += 1
        if name == base.family:
            return lines, meta
        for v in range(spec.variants):
            if produced >= spec.n_malicious:
                break
            variant_of(sample, lines, meta, rng, f"{name}_v{v + 1}")
            produced += 1
        base_idx += 1
    raise KeyError(f"{base.family} is not a base sample of this corpus")


# ---------------------------------------------------------------------------
# case-study fixture


CASE_STUDY = """\
.meta name case_study
.meta label malicious
.meta behavior exfil
.meta inputs 3
; three environment checks guard an exfiltration payload
entry:
    INPUT r0                ; env_check flag
    INPUT r1                ; locale byte
    SYSCALL TIME, r2        ; clock reading
guard0:
    BR.ne r0, 0, decoy      ; env_check == false
guard1:
    BR.ne r1, 7, decoy      ; expected locale
guard2:
    BR.uge r2, 30, decoy    ; short uptime
payload:
    SYSCALL READ_FILE, SENSITIVE_DOC
    SYSCALL SOCKET, r5
    SYSCALL SEND, r5, r1
    HALT
decoy:
    CONST r6, 8192
    STORE r6, 0, r0
    HALT
"""


def case_study_program() -> Program:
    return parse_program(CASE_STUDY)


# ---------------------------------------------------------------------------
# corpus directories


def write_corpus(samples: Sequence[Sample], out_dir: str | Path, spec: CorpusSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        (out / f"{s.name}.asm").write_text(pretty_print(s.program))
    manifest = {
        "version": CORPUS_VERSION,
        "spec": asdict(spec) if spec is not None else None,
        "samples": [s.manifest_entry() for s in samples],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_corpus(corpus_dir: str | Path) -> list[Sample]:
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {manifest.get('version')}")
    out = []
    for e in manifest["samples"]:
        program = parse_program((root / e["file"]).read_text())
        out.append(Sample(
            e["name"], program, bool(e["label"]), e["behavior"], e["family"],
            PathConstraint.from_json(e["trigger"]), bytes.fromhex(e["witness"]),
            tuple(e["guard_sites"]), int(e["inputs"]),
        ))
    return out
