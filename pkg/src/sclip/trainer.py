"""Two-tower toy training loop with hand-written backprop.

Each tower maps raw features to the joint space with a linear map (or a tanh
hidden layer followed by a linear map) and then normalizes rows. Pseudo-label
targets are computed from detached embeddings before the loss is evaluated,
so gradient checks hold them fixed.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, pseudo, sinkhorn
from .core_math import normalize_rows
from .errors import BadMagic, ConfigInvalid, DimMismatch, NonFiniteLoss, ParseError

log = logging.getLogger(__name__)

METHODS = ("supervised", "hard_pl", "soft_pl", "sclip", "sclip_pseudo_embed")
TOWERS = ("image", "text")
TAU_RANGE = (0.01, 1.0)


@dataclass
class TrainConfig:
    method: str = "sclip"
    n_paired_per_batch: int = 32
    m_unpaired_per_batch: int = 32
    tau: float = 0.07
    sinkhorn_iterations: int = 10
    lam: float | None = None          # None -> follow tau
    epochs: int = 10
    learning_rate: float = 1e-2
    momentum: float = 0.9
    warmup_steps: int = 10
    schedule: str = "cosine"
    total_steps: int | None = None    # filled in by the runner for cosine decay
    freeze: str = "none"
    keyword_source_embeddings: str = "per_step_text_encoder"
    embed_dim: int = 16
    hidden_dim: int = 0
    learnable_tau: bool = False
    # ablation switches
    use_caption_loss: bool = True
    use_keyword_loss: bool = True
    pll: str = "soft"                 # soft | hardmax
    pseudo_source: str = "image"      # image | text
    seed: int = 0

    @property
    def effective_lambda(self) -> float:
        return self.tau if self.lam is None else self.lam

    def validate(self) -> None:
        choices = {
            "method": METHODS,
            "schedule": ("constant", "cosine"),
            "freeze": ("none", "image", "text"),
            "keyword_source_embeddings": ("per_step_text_encoder", "fixed"),
            "pll": ("soft", "hardmax"),
            "pseudo_source": ("image", "text"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigInvalid(f"train.{name}", f"must be one of {list(allowed)}")
        positive = {"tau": self.tau, "lam": self.effective_lambda}
        for name, v in positive.items():
            if not (isinstance(v, (int, float)) and v > 0):
                raise ConfigInvalid(f"train.{name}", "must be > 0")
        if self.n_paired_per_batch < 2:
            raise ConfigInvalid("train.n_paired_per_batch", "must be >= 2")
        if self.method != "supervised" and self.m_unpaired_per_batch < 2:
            raise ConfigInvalid("train.m_unpaired_per_batch", "must be >= 2")
        if self.m_unpaired_per_batch < 0:
            raise ConfigInvalid("train.m_unpaired_per_batch", "must be >= 0")
        for name in ("sinkhorn_iterations", "warmup_steps", "epochs", "hidden_dim"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"train.{name}", "must be >= 0")
        if self.learning_rate < 0:
            raise ConfigInvalid("train.learning_rate", "must be >= 0")
        if self.embed_dim < 1:
            raise ConfigInvalid("train.embed_dim", "must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid("train." + sorted(unknown)[0], "unknown field")
        return cls(**d)


# --- parameters ----------------------------------------------------------------


@dataclass
class EncoderParams:
    image: dict[str, np.ndarray]
    text: dict[str, np.ndarray]
    tau: float | None = None          # set only when the temperature is learned

    def tower(self, name: str) -> dict[str, np.ndarray]:
        return self.image if name == "image" else self.text

    def named(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{t}.{k}", v) for t in TOWERS for k, v in sorted(self.tower(t).items())]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            {k: v.copy() for k, v in self.image.items()},
            {k: v.copy() for k, v in self.text.items()},
            self.tau,
        )

    def input_dim(self, tower: str) -> int:
        t = self.tower(tower)
        return (t["w1"] if "w1" in t else t["w"]).shape[0]


def _init_tower(rng, d_in: int, d_out: int, hidden: int) -> dict[str, np.ndarray]:
    if hidden:
        return {
            "w1": rng.standard_normal((d_in, hidden)) / math.sqrt(d_in),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, d_out)) / math.sqrt(hidden),
        }
    return {"w": rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)}


def init_params(d_img_raw: int, d_txt_raw: int, cfg: TrainConfig) -> EncoderParams:
    rng = np.random.default_rng([cfg.seed, 101])
    return EncoderParams(
        _init_tower(rng, d_img_raw, cfg.embed_dim, cfg.hidden_dim),
        _init_tower(rng, d_txt_raw, cfg.embed_dim, cfg.hidden_dim),
        cfg.tau if cfg.learnable_tau else None,
    )


# --- forward / backward ----------------------------------------------------------


@dataclass
class _Cache:
    raw: np.ndarray
    hidden: np.ndarray | None
    pre: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def _forward(tower: dict[str, np.ndarray], raw: np.ndarray) -> _Cache:
    hidden = None
    if "w1" in tower:
        hidden = np.tanh(raw @ tower["w1"] + tower["b1"])
        pre = hidden @ tower["w2"]
    else:
        pre = raw @ tower["w"]
    out = normalize_rows(pre)   # raises before an overflowing norm can be used
    return _Cache(raw, hidden, pre, np.linalg.norm(pre, axis=1), out)


def _backward(tower: dict[str, np.ndarray], cache: _Cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    # exact Jacobian of row normalization: (I - e e^T) / |a|
    e = cache.out
    g_pre = (g_out - e * (e * g_out).sum(axis=1, keepdims=True)) / cache.norms[:, None]
    if cache.hidden is None:
        return {"w": cache.raw.T @ g_pre}
    g_h = (g_pre @ tower["w2"].T) * (1.0 - cache.hidden**2)
    return {"w2": cache.hidden.T @ g_pre, "w1": cache.raw.T @ g_h, "b1": g_h.sum(axis=0)}


def encode(params: EncoderParams, raw, tower: str) -> np.ndarray:
    """Map raw features through one tower and normalize rows."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if raw.shape[1] != params.input_dim(tower):
        raise DimMismatch(f"{tower} tower expects width {params.input_dim(tower)}, got {raw.shape[1]}")
    return _forward(params.tower(tower), raw).out


# --- batches and targets ---------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray                 # N x d_img
    texts: np.ndarray                  # N x d_txt
    caption_keywords: list[list[int]]  # keywords of each sampled caption
    unpaired: np.ndarray               # M x d_img (M may be 0)
    keyword_raw: np.ndarray            # K x d_txt
    fixed_keywords: np.ndarray | None = None  # K x d, used in "fixed" mode


@dataclass
class Targets:
    caption: pseudo.PseudoLabelMatrix | None = None
    keyword: pseudo.PseudoLabelMatrix | None = None
    pseudo_text: np.ndarray | None = None      # normalized pseudo-embeddings
    pseudo_rows: np.ndarray | None = None      # unpaired rows that have one
    keyword_embeddings: np.ndarray | None = None


def _tau(params: EncoderParams, cfg: TrainConfig) -> float:
    return params.tau if params.tau is not None else cfg.tau


def _uses_unpaired(cfg: TrainConfig) -> bool:
    return cfg.method != "supervised"


def _wants_keywords(cfg: TrainConfig) -> bool:
    return cfg.method in ("sclip", "sclip_pseudo_embed") and cfg.use_keyword_loss


def _wants_caption(cfg: TrainConfig) -> bool:
    if cfg.method in ("hard_pl", "soft_pl"):
        return True
    return cfg.method in ("sclip", "sclip_pseudo_embed") and cfg.use_caption_loss


def keyword_embeddings(params: EncoderParams, batch: Batch, cfg: TrainConfig) -> np.ndarray:
    if cfg.keyword_source_embeddings == "fixed" and batch.fixed_keywords is not None:
        return batch.fixed_keywords
    return encode(params, batch.keyword_raw, "text")


def compute_targets(params: EncoderParams, batch: Batch, cfg: TrainConfig) -> Targets:
    """Pseudo-labels for the unpaired images, from the current (detached) embeddings."""
    t = Targets()
    if not _uses_unpaired(cfg) or batch.unpaired.shape[0] == 0:
        return t
    tau = _tau(params, cfg)
    x = encode(params, batch.images, "image")
    y = encode(params, batch.texts, "text")
    u = encode(params, batch.unpaired, "image")
    anchors = x if cfg.pseudo_source == "image" else y

    if cfg.method == "hard_pl":
        t.caption = pseudo.hard_pl(u, anchors)
        return t
    if cfg.method == "soft_pl":
        t.caption = pseudo.soft_pl(u, anchors, tau)
        return t

    lam = tau if cfg.lam is None else cfg.lam
    plan = sinkhorn.solve(sinkhorn.cost_from_embeddings(u, anchors), lam=lam,
                          iterations=cfg.sinkhorn_iterations)
    q = pseudo.caption_pseudo_labels(plan)
    if _wants_caption(cfg):
        if cfg.method == "sclip":
            t.caption = q
        else:
            z = pseudo.pseudo_embeddings(q, y)
            keep = np.flatnonzero(np.linalg.norm(z, axis=1) > 1e-12)
            t.pseudo_rows = keep
            t.pseudo_text = normalize_rows(z[keep]) if keep.size else np.zeros((0, z.shape[1]))

    if _wants_keywords(cfg):
        k = keyword_embeddings(params, batch, cfg)
        t.keyword_embeddings = k
        catalog = pseudo.KeywordCatalog(k, batch.caption_keywords)
        cand = pseudo.keyword_candidates(catalog, pseudo.nearest_labeled(plan))
        if cfg.pll == "soft":
            t.keyword = pseudo.keyword_pseudo_labels(u, catalog, cand, tau)
        else:
            choice = losses.hardmax_choice(u, k, cand)
            vals = np.zeros((u.shape[0], k.shape[0]))
            skipped = np.array([c is None for c in choice])
            for i, c in enumerate(choice):
                if c is not None:
                    vals[i, c] = 1.0
            t.keyword = pseudo.PseudoLabelMatrix(vals, skipped, [[c] if c is not None else [] for c in choice])
    return t


# --- loss and parameter gradients -----------------------------------------------------


@dataclass
class StepLoss:
    total: float
    clip: float
    caption: float
    keyword: float
    grads: dict                        # "image"/"text" -> dict of arrays, "tau" -> float


def loss_and_grads(params: EncoderParams, batch: Batch, cfg: TrainConfig, targets: Targets) -> StepLoss:
    tau = _tau(params, cfg)
    img = params.image
    txt = params.text
    cx = _forward(img, batch.images)
    cy = _forward(txt, batch.texts)
    clip = losses.clip_loss(cx.out, cy.out, tau)

    caption = keyword = None
    cu = ck = None
    if targets.caption is not None or targets.pseudo_text is not None or targets.keyword is not None:
        cu = _forward(img, batch.unpaired)
    if targets.caption is not None:
        caption = losses.caption_loss(cu.out, cy.out, targets.caption, tau)
    elif targets.pseudo_text is not None:
        rows = targets.pseudo_rows
        if rows.size >= 2:
            pe = losses.clip_loss(cu.out[rows], targets.pseudo_text, tau)
            g_u = np.zeros_like(cu.out)
            g_u[rows] = pe.grads["x"]
            caption = losses.LossValue(pe.value, {"u": g_u, "tau": pe.grads["tau"]})
    if targets.keyword is not None:
        if cfg.keyword_source_embeddings == "fixed":
            k_embs = targets.keyword_embeddings
        else:
            ck = _forward(txt, batch.keyword_raw)
            k_embs = ck.out
        keyword = losses.keyword_loss(cu.out, k_embs, targets.keyword, tau)
        if ck is None:
            keyword.grads.pop("k", None)

    total = losses.total_loss(clip, caption, keyword)
    g = total.grads
    grads: dict = {}
    if cfg.freeze != "image":
        gi = _backward(img, cx, g["x"])
        if "u" in g:
            gu = _backward(img, cu, g["u"])
            gi = {k: gi[k] + gu[k] for k in gi}
        grads["image"] = gi
    if cfg.freeze != "text":
        gt = _backward(txt, cy, g["y"])
        if "k" in g and ck is not None:
            gk = _backward(txt, ck, g["k"])
            gt = {k: gt[k] + gk[k] for k in gt}
        grads["text"] = gt
    if params.tau is not None:
        grads["tau"] = g["tau"]
    return StepLoss(
        total.value,
        clip.value,
        caption.value if caption is not None else 0.0,
        keyword.value if keyword is not None else 0.0,
        grads,
    )


# --- optimizer ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    tau_momentum: float = 0.0
    step: int = 0

    @classmethod
    def for_params(cls, params: EncoderParams) -> "OptimizerState":
        return cls({name: np.zeros_like(v) for name, v in params.named()})

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: v.copy() for k, v in self.momentum.items()}, self.tau_momentum, self.step)


def lr_at(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup from 0, then constant or cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    base = cfg.learning_rate
    warm = cfg.warmup_steps
    if warm > 0 and step < warm:
        return base * step / warm
    if cfg.schedule == "constant":
        return base
    total = total_steps if total_steps is not None else cfg.total_steps
    if total is None or total <= warm:
        return base
    frac = min(1.0, (step - warm) / (total - warm))
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))


def _check_finite(sl: StepLoss, step: int) -> None:
    bad = [name for name, v in (("total", sl.total), ("clip", sl.clip),
                                ("caption", sl.caption), ("keyword", sl.keyword)) if not math.isfinite(v)]
    for tower in TOWERS:
        for k, g in sl.grads.get(tower, {}).items():
            if not np.all(np.isfinite(g)):
                bad.append(f"grad {tower}.{k}")
    if bad:
        raise NonFiniteLoss(f"step {step}: non-finite values in {', '.join(bad)}")


def train_step(
    params: EncoderParams,
    opt: OptimizerState,
    batch: Batch,
    cfg: TrainConfig,
) -> tuple[EncoderParams, OptimizerState, dict]:
    """One optimizer step; returns new parameters, new state and step metrics."""
    targets = compute_targets(params, batch, cfg)
    sl = loss_and_grads(params, batch, cfg, targets)
    _check_finite(sl, opt.step)
    lr = lr_at(opt.step, cfg)

    new_params = params.copy()
    new_opt = opt.copy()
    mu = cfg.momentum
    for tower in TOWERS:
        if tower not in sl.grads:
            continue
        dest = new_params.tower(tower)
        for k, g in sl.grads[tower].items():
            name = f"{tower}.{k}"
            buf = mu * new_opt.momentum[name] + g
            new_opt.momentum[name] = buf
            dest[k] = dest[k] - lr * buf
    if "tau" in sl.grads:
        new_opt.tau_momentum = mu * new_opt.tau_momentum + sl.grads["tau"]
        new_params.tau = float(np.clip(params.tau - lr * new_opt.tau_momentum, *TAU_RANGE))
    for name, v in new_params.named():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLoss(f"step {opt.step}: parameter {name} became non-finite")
    new_opt.step = opt.step + 1
    metrics = {
        "step": opt.step,
        "lr": lr,
        "loss": sl.total,
        "loss_clip": sl.clip,
        "loss_caption": sl.caption,
        "loss_keyword": sl.keyword,
    }
    return new_params, new_opt, metrics


def batch_loss(params: EncoderParams, batch: Batch, cfg: TrainConfig) -> float:
    return loss_and_grads(params, batch, cfg, compute_targets(params, batch, cfg)).total


# --- gradient check -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    absent: list[str]
    entries_checked: int


def grad_check(
    params: EncoderParams,
    batch: Batch,
    cfg: TrainConfig,
    epsilon: float = 1e-5,
    max_entries: int = 2000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic parameter gradients with central finite differences.

    Pseudo-label targets are computed once and held fixed, matching the
    stop-gradient used in training. Parameters with more than ``max_entries``
    entries in total are checked on a fixed random subsample.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    targets = compute_targets(params, batch, cfg)
    analytic = loss_and_grads(params, batch, cfg, targets).grads
    rng = np.random.default_rng(seed)

    def f(p):
        return loss_and_grads(p, batch, cfg, targets).total

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    total_entries = sum(v.size for _, v in params.named())
    per_param: dict[str, float] = {}
    absent = [t for t in TOWERS if t not in analytic]
    checked = 0
    for tower in TOWERS:
        if tower not in analytic:
            continue
        for k in sorted(params.tower(tower)):
            arr = params.tower(tower)[k]
            idx = np.arange(arr.size)
            if total_entries > max_entries:
                share = max(1, int(round(max_entries * arr.size / total_entries)))
                idx = np.sort(rng.choice(arr.size, size=min(share, arr.size), replace=False))
            worst = 0.0
            for flat in idx:
                pos = np.unravel_index(flat, arr.shape)
                plus = params.copy()
                plus.tower(tower)[k][pos] += epsilon
                minus = params.copy()
                minus.tower(tower)[k][pos] -= epsilon
                fd = (f(plus) - f(minus)) / (2 * epsilon)
                worst = max(worst, rel(analytic[tower][k][pos], fd))
            per_param[f"{tower}.{k}"] = worst
            checked += idx.size
    if params.tau is not None:
        plus = params.copy()
        plus.tau += epsilon
        minus = params.copy()
        minus.tau -= epsilon
        per_param["tau"] = rel(analytic["tau"], (f(plus) - f(minus)) / (2 * epsilon))
        checked += 1
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, absent, checked)


# --- checkpoints ----------------------------------------------------------------------
#
# magic "SCKP1"; u32 config length + UTF-8 JSON config echo; u32 step;
# f64 tau (NaN when fixed); f64 tau momentum; u32 array count; per array:
# u32 name length, name, u32 ndim, u32 dims..., f64 little-endian payload.
# Parameter arrays are named "param:<tower>.<key>", buffers "momentum:<tower>.<key>".

CHECKPOINT_MAGIC = b"SCKP1"


def checkpoint_to_bytes(params: EncoderParams, opt: OptimizerState, cfg: TrainConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", opt.step))
    buf.write(struct.pack("<dd", math.nan if params.tau is None else params.tau, opt.tau_momentum))
    arrays = [(f"param:{n}", v) for n, v in params.named()]
    arrays += [(f"momentum:{n}", opt.momentum[n]) for n in sorted(opt.momentum)]
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> tuple[EncoderParams, OptimizerState, TrainConfig]:
    if data[:5] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"checkpoint truncated at offset {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    def u32():
        return struct.unpack("<I", take(4))[0]

    cfg = TrainConfig.from_dict(json.loads(take(u32()).decode()))
    step = u32()
    tau, tau_mom = struct.unpack("<dd", take(16))
    image, text, mom = {}, {}, {}
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        kind, qual = name.split(":", 1)
        tower, key = qual.split(".", 1)
        if kind == "param":
            (image if tower == "image" else text)[key] = arr
        else:
            mom[qual] = arr
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    params = EncoderParams(image, text, None if math.isnan(tau) else tau)
    return params, OptimizerState(mom, tau_mom, step), cfg


def save_checkpoint(path, params: EncoderParams, opt: OptimizerState, cfg: TrainConfig) -> None:
    from .formats import atomic_write

    atomic_write(Path(path), checkpoint_to_bytes(params, opt, cfg))


def load_checkpoint(path) -> tuple[EncoderParams, OptimizerState, TrainConfig]:
    return checkpoint_from_bytes(Path(path).read_bytes())
