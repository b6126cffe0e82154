"""Path classifier: token stream -> small transformer encoder -> sigmoid score.

The token stream is ``[CLS] sym-buckets [SEP] syscalls... [SEP] cfg-buckets
mem-buckets`` padded to ``max_len``.  Numeric features become one of 16
log2-spaced bucket tokens per slot.  The encoder is pre-LayerNorm with
sinusoidal positions and PAD keys masked out of attention; the CLS row feeds a
two-layer head.  Everything is float64 numpy with hand-written backprop.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import features
from .solver import PathConstraint
from .vm import SYSCALL_VOCAB, Program, Trace

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Verdict(str, enum.Enum):
    MALICIOUS = "MALICIOUS"
    BENIGN = "BENIGN"


# ---------------------------------------------------------------------------
# tokenization

PAD, CLS, SEP = 0, 1, 2
N_BUCKETS = 16
NUMERIC_SLOTS = features.SYM_NAMES + features.CFG_NAMES + features.MEM_NAMES
_BUCKET_BASE = 3
_SYSCALL_BASE = _BUCKET_BASE + N_BUCKETS * len(NUMERIC_SLOTS)
VOCAB_SIZE = _SYSCALL_BASE + len(SYSCALL_VOCAB)
TOKEN_VOCAB_HASH = hashlib.sha256(
    (features.VOCAB_HASH + "|" + ",".join(NUMERIC_SLOTS) + f"|{N_BUCKETS}|" + ",".join(k.value for k in SYSCALL_VOCAB)).encode()
).hexdigest()[:16]

_SLOT_INDEX = [features.FEATURE_NAMES.index(n) for n in NUMERIC_SLOTS]
_HEAD_SLOTS = len(features.SYM_NAMES)
_TAIL_SLOTS = len(features.CFG_NAMES) + len(features.MEM_NAMES)
MIN_LEN = 1 + _HEAD_SLOTS + 1 + 1 + _TAIL_SLOTS


def bucket(x: float) -> int:
    """0 for x <= 0, else 1 + floor(log2 x), capped at 15."""
    if x <= 0:
        return 0
    return int(min(N_BUCKETS - 1, 1 + math.floor(math.log2(x)))) if x >= 1 else 1


def bucket_token(slot: int, x: float) -> int:
    return _BUCKET_BASE + slot * N_BUCKETS + bucket(x)


def syscall_token(kind) -> int:
    return _SYSCALL_BASE + SYSCALL_VOCAB.index(kind)


def tokenize(feats: np.ndarray, trace: Trace, max_len: int = 128) -> np.ndarray:
    if max_len < MIN_LEN:
        raise ValueError(f"max_len must be at least {MIN_LEN}")
    nums = [bucket_token(i, feats[j]) for i, j in enumerate(_SLOT_INDEX)]
    head = [CLS] + nums[:_HEAD_SLOTS] + [SEP]
    tail = [SEP] + nums[_HEAD_SLOTS:]
    room = max_len - len(head) - len(tail)
    calls = [syscall_token(k) for k in trace.syscalls()[:room]]
    toks = head + calls + tail
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(toks)] = toks
    return out


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_len: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model < 2 or self.max_len < MIN_LEN:
            raise ValueError("model too small")


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class EncoderParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    training_curve: list[dict] = field(default_factory=list)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, list(self.training_curve))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equals(self, other: "EncoderParams") -> bool:
        return self.config == other.config and self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "vocab_hash": TOKEN_VOCAB_HASH,
            "config": asdict(self.config),
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.tensors.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "EncoderParams":
        if d.get("version") != CHECKPOINT_VERSION or d.get("vocab_hash") != TOKEN_VOCAB_HASH:
            raise features.LayoutMismatch("checkpoint was written for a different token vocabulary")
        cfg = ModelConfig(**d["config"])
        tensors = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["tensors"].items()}
        params = cls(cfg, tensors)
        expected = init_params(cfg, 0)
        for k, v in expected.tensors.items():
            if k not in tensors or tensors[k].shape != v.shape:
                raise ValueError(f"checkpoint tensor {k!r} missing or mis-shaped")
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "EncoderParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_params(cfg: ModelConfig, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff

    def dense(n_in: int, n_out: int) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    t: dict[str, np.ndarray] = {"embed": rng.normal(0.0, 1.0 / math.sqrt(d), size=(VOCAB_SIZE, d))}
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        t[p + "ln1_g"], t[p + "ln1_b"] = np.ones(d), np.zeros(d)
        for name in ("q", "k", "v", "o"):
            t[p + "w" + name] = dense(d, d)
            t[p + "b" + name] = np.zeros(d)
        t[p + "ln2_g"], t[p + "ln2_b"] = np.ones(d), np.zeros(d)
        t[p + "w1"], t[p + "b1"] = dense(d, f), np.zeros(f)
        t[p + "w2"], t[p + "b2"] = dense(f, d), np.zeros(d)
    t["lnf_g"], t["lnf_b"] = np.ones(d), np.zeros(d)
    h = max(1, d // 2)
    t["head_w1"], t["head_b1"] = dense(d, h), np.zeros(h)
    t["head_w2"], t["head_b2"] = dense(h, 1)[:, 0], np.zeros(())
    return EncoderParams(cfg, t)


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# building blocks (forward returns a cache, backward consumes it)

_LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def _gelu_fwd(u):
    inner = _GELU_K * (u + 0.044715 * u * u * u)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def _gelu_bwd(dy, cache):
    u, t = cache
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * u * u))


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _softplus(x):
    return np.logaddexp(0.0, x)


class _Net:
    """Forward/backward for a batch of token sequences."""

    def __init__(self, params: EncoderParams):
        self.p = params.tensors
        self.cfg = params.config

    def forward(self, tokens: np.ndarray, rng: np.random.Generator | None = None):
        cfg, p = self.cfg, self.p
        tokens = np.atleast_2d(tokens)
        if tokens.shape[1] > cfg.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
        if tokens.min() < 0 or tokens.max() >= p["embed"].shape[0]:
            raise ValueError("token id outside vocabulary")
        # trailing all-PAD columns are masked keys and never reach the CLS row
        used = np.flatnonzero((tokens != PAD).any(0))
        tokens = tokens[:, : used[-1] + 1 if used.size else 1]
        bsz, length = tokens.shape
        nh, d = cfg.n_heads, cfg.d_model
        dh = d // nh
        keymask = (tokens != PAD)[:, None, None, :]  # B,1,1,L
        x = p["embed"][tokens] + positional_encoding(length, d)[None]
        caches = []
        for layer in range(cfg.n_layers):
            pre = f"l{layer}."
            h1, ln1 = _ln_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = (h1 @ p[pre + "wq"] + p[pre + "bq"]).reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)
            k = (h1 @ p[pre + "wk"] + p[pre + "bk"]).reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)
            v = (h1 @ p[pre + "wv"] + p[pre + "bv"]).reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
            s = np.where(keymask, s, -np.inf)
            e = np.exp(s - s.max(-1, keepdims=True))
            e = np.where(keymask, e, 0.0)
            att = e / e.sum(-1, keepdims=True)
            a = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, length, d)
            o = a @ p[pre + "wo"] + p[pre + "bo"]
            o, drop1 = _dropout(o, cfg.dropout, rng)
            x = x + o
            h2, ln2 = _ln_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            u = h2 @ p[pre + "w1"] + p[pre + "b1"]
            g, gel = _gelu_fwd(u)
            f = g @ p[pre + "w2"] + p[pre + "b2"]
            f, drop2 = _dropout(f, cfg.dropout, rng)
            x = x + f
            caches.append((h1, ln1, q, k, v, att, a, drop1, h2, ln2, g, gel, drop2))
        xf, lnf = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
        c = xf[:, 0]
        hu = c @ p["head_w1"] + p["head_b1"]
        hg, hgel = _gelu_fwd(hu)
        z = hg @ p["head_w2"] + p["head_b2"]
        self.cache = (tokens, caches, lnf, c, hg, hgel)
        return z

    def backward(self, dz: np.ndarray) -> dict[str, np.ndarray]:
        cfg, p = self.cfg, self.p
        tokens, caches, lnf, c, hg, hgel = self.cache
        bsz, length = tokens.shape
        nh, d = cfg.n_heads, cfg.d_model
        dh = d // nh
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["head_w2"] = hg.T @ dz
        grads["head_b2"] = np.asarray(dz.sum())
        dhg = np.outer(dz, p["head_w2"])
        dhu = _gelu_bwd(dhg, hgel)
        grads["head_w1"] = c.T @ dhu
        grads["head_b1"] = dhu.sum(0)
        dxf = np.zeros((bsz, length, d))
        dxf[:, 0] = dhu @ p["head_w1"].T
        dx, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dxf, lnf)
        for layer in range(cfg.n_layers - 1, -1, -1):
            pre = f"l{layer}."
            h1, ln1, q, k, v, att, a, drop1, h2, ln2, g, gel, drop2 = caches[layer]
            df = dx if drop2 is None else dx * drop2
            grads[pre + "w2"] = g.reshape(-1, g.shape[-1]).T @ df.reshape(-1, d)
            grads[pre + "b2"] = df.sum((0, 1))
            dg = df @ p[pre + "w2"].T
            du = _gelu_bwd(dg, gel)
            grads[pre + "w1"] = h2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            grads[pre + "b1"] = du.sum((0, 1))
            dh2 = du @ p[pre + "w1"].T
            dxl, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _ln_bwd(dh2, ln2)
            dx = dx + dxl
            do = dx if drop1 is None else dx * drop1
            grads[pre + "wo"] = a.reshape(-1, d).T @ do.reshape(-1, d)
            grads[pre + "bo"] = do.sum((0, 1))
            da = (do @ p[pre + "wo"].T).reshape(bsz, length, nh, dh).transpose(0, 2, 1, 3)
            datt = da @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ da
            ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dh1 = np.zeros((bsz, length, d))
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dflat = dproj.transpose(0, 2, 1, 3).reshape(bsz, length, d)
                grads[pre + "w" + name] = h1.reshape(-1, d).T @ dflat.reshape(-1, d)
                grads[pre + "b" + name] = dflat.sum((0, 1))
                dh1 += dflat @ p[pre + "w" + name].T
            dxl, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _ln_bwd(dh1, ln1)
            dx = dx + dxl
        np.add.at(grads["embed"], tokens, dx)
        return grads


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward(tokens: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Inference scores in (0, 1) for one sequence or a batch (dropout off)."""
    single = np.asarray(tokens).ndim == 1
    s = sigmoid(_Net(params).forward(np.asarray(tokens, dtype=np.int64)))
    return float(s[0]) if single else s


def classify(
    pi: PathConstraint, trace: Trace, program: Program, params: EncoderParams, tau_thresh: float = 0.5
) -> tuple[Verdict, float]:
    tokens = tokenize(features.extract(pi, trace, program), trace, params.config.max_len)
    s = forward(tokens, params)
    return threshold(s, tau_thresh), s


def threshold(s: float, tau_thresh: float) -> Verdict:
    return Verdict.MALICIOUS if s >= tau_thresh else Verdict.BENIGN


# ---------------------------------------------------------------------------
# loss and training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    epochs: int = 50
    fp_weight: float = 5.0
    fn_weight: float = 1.0
    dropout: float = 0.1
    label_smoothing: float = 0.05
    gradient_clip: float = 1.0
    tau_thresh: float = 0.5
    seed: int = 0
    t0: int = 10
    t_mult: int = 2
    warmup_steps: int = 0

    def __post_init__(self):
        if self.fp_weight <= 0 or self.fn_weight <= 0:
            raise ValueError("loss weights must be positive")
        if not 0.0 < self.tau_thresh < 1.0:
            raise ValueError("tau_thresh must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("invalid batch size, epoch count or learning rate")


@dataclass(frozen=True)
class LossTerms:
    positive: float  # fp_weight * mean(-y' log s)
    negative: float  # fn_weight * mean(-(1 - y') log(1 - s))

    @property
    def total(self) -> float:
        return self.positive + self.negative


def smooth_labels(y: np.ndarray, ls: float) -> np.ndarray:
    return np.asarray(y, dtype=float) * (1.0 - ls) + 0.5 * ls


def loss_terms(z: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> LossTerms:
    t = smooth_labels(y, cfg.label_smoothing)
    pos = cfg.fp_weight * float(np.mean(t * _softplus(-z)))
    neg = cfg.fn_weight * float(np.mean((1.0 - t) * _softplus(z)))
    return LossTerms(pos, neg)


def loss_grad_z(z: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    t = smooth_labels(y, cfg.label_smoothing)
    s = sigmoid(z)
    return (cfg.fn_weight * (1.0 - t) * s - cfg.fp_weight * t * (1.0 - s)) / len(z)


def loss_and_grads(params: EncoderParams, tokens: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator | None = None) -> tuple[LossTerms, dict[str, np.ndarray]]:
    net = _Net(params)
    z = net.forward(tokens, rng)
    return loss_terms(z, y, cfg), net.backward(loss_grad_z(z, y, cfg))


def cosine_warm_restart_lr(base: float, epoch: float, t0: int, t_mult: int, eta_min: float = 0.0) -> float:
    t_i, t_cur = t0, epoch
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return eta_min + (base - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i)) / 2.0


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params[k] -= lr * self.wd * params[k]
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def train_tokens(
    tokens: np.ndarray, labels: Sequence[int], cfg: TrainConfig, model: ModelConfig | None = None,
    init: EncoderParams | None = None,
) -> EncoderParams:
    """Train on pre-tokenized sequences; deterministic given ``cfg.seed``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    y = np.asarray(labels, dtype=float)
    if len(tokens) != len(y) or len(y) == 0:
        raise ValueError("need one label per sequence and at least one sample")
    if len(set(y.tolist())) < 2:
        raise ValueError(f"training set has a single class ({int(y[0])}); both labels are required")
    if init is None:
        model = model or ModelConfig(max_len=tokens.shape[1], dropout=cfg.dropout)
        params = init_params(model, cfg.seed)
    else:
        params = init.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamW(params.tensors, cfg.learning_rate, cfg.weight_decay)
    n = len(y)
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lr_epoch = cosine_warm_restart_lr(cfg.learning_rate, epoch, cfg.t0, cfg.t_mult)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            terms, grads = loss_and_grads(params, tokens[idx], y[idx], cfg, rng)
            clip_global_norm(grads, cfg.gradient_clip)
            lr = lr_epoch * min(1.0, (steps + 1) / cfg.warmup_steps) if cfg.warmup_steps else lr_epoch
            opt.step(params.tensors, grads, lr)
            steps += 1
            total += terms.total * len(idx)
        acc = accuracy(params, tokens, y, cfg.tau_thresh)
        params.training_curve.append({"epoch": epoch, "loss": total / n, "accuracy": acc, "lr": lr_epoch})
        log.info("epoch %d loss %.5f acc %.4f lr %.2e", epoch, total / n, acc, lr_epoch)
    return params


def accuracy(params: EncoderParams, tokens: np.ndarray, y: np.ndarray, tau: float = 0.5) -> float:
    s = forward(tokens, params)
    s = np.atleast_1d(s)
    return float(np.mean((s >= tau) == (np.asarray(y) >= 0.5)))


@dataclass(frozen=True)
class LabeledPath:
    pi: PathConstraint
    trace: Trace
    program: Program
    label: int  # 1 = malicious


def tokenize_dataset(samples: Iterable[LabeledPath], max_len: int = 128) -> tuple[np.ndarray, np.ndarray]:
    toks, ys = [], []
    for s in samples:
        toks.append(tokenize(features.extract(s.pi, s.trace, s.program), s.trace, max_len))
        ys.append(s.label)
    return np.array(toks, dtype=np.int64).reshape(len(toks), max_len), np.array(ys, dtype=float)


def train(dataset: Sequence[LabeledPath], cfg: TrainConfig, model: ModelConfig | None = None) -> EncoderParams:
    model = model or ModelConfig(dropout=cfg.dropout)
    tokens, y = tokenize_dataset(dataset, model.max_len)
    return train_tokens(tokens, y, cfg, model)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    params: EncoderParams, tokens: np.ndarray, label: float, cfg: TrainConfig | None = None,
    n_coords: int = 50, h: float = 1e-5, seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    cfg = cfg or TrainConfig()
    if params.config.dropout:
        params = EncoderParams(ModelConfig(**{**asdict(params.config), "dropout": 0.0}), params.tensors)
    params = params.copy()
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    y = np.full(len(tokens), float(label))
    _, grads = loss_and_grads(params, tokens, y, cfg)
    rng = np.random.default_rng(seed)
    names = sorted(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names], dtype=float)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = params.tensors[name]
        if name == "embed":
            # only rows of tokens actually present carry gradient
            row = int(rng.choice(np.unique(tokens)))
            flat = row * arr.shape[1] + int(rng.integers(arr.shape[1]))
        else:
            flat = int(rng.integers(arr.size))
        view = arr.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        lp = loss_terms(_Net(params).forward(tokens), y, cfg).total
        view[flat] = orig - h
        lm = loss_terms(_Net(params).forward(tokens), y, cfg).total
        view[flat] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[name].reshape(-1)[flat])
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return worst
