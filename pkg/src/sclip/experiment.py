"""Seeded experiment runner: data, per-method training, periodic evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import trainer
from .errors import ConfigInvalid, SpecInvalid
from .evaluation import EvalReport, evaluate
from .synthdata import Dataset, WorldSpec, make_dataset
from .trainer import Batch, EncoderParams, OptimizerState, TrainConfig

log = logging.getLogger(__name__)

METRICS_VERSION = 1


@dataclass
class DataConfig:
    pool_size: int = 2000
    labeled_fraction: float = 0.1
    n_test: int = 500

    @property
    def n_labeled(self) -> int:
        return int(round(self.pool_size * self.labeled_fraction))

    @property
    def n_unlabeled(self) -> int:
        return self.pool_size - self.n_labeled


@dataclass
class EvalConfig:
    eval_every_epochs: int = 1
    retrieval_ks: list[int] = field(default_factory=lambda: [1, 5])


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    methods_to_compare: list[str] = field(default_factory=list)
    summarize: bool = False

    def methods(self) -> list[str]:
        return list(self.methods_to_compare) or [self.train.method]

    def validate(self) -> None:
        try:
            self.world.validate()
        except SpecInvalid as exc:
            field_name, _, msg = str(exc).partition(": ")
            raise ConfigInvalid(f"world.{field_name}", msg) from None
        self.train.validate()
        for m in self.methods_to_compare:
            if m not in trainer.METHODS:
                raise ConfigInvalid("methods_to_compare", f"unknown method {m!r}")
        d = self.data
        if not 0 < d.labeled_fraction <= 1:
            raise ConfigInvalid("data.labeled_fraction", "must be in (0, 1]")
        if d.n_labeled < self.train.n_paired_per_batch:
            raise ConfigInvalid("data.pool_size", "labeled pairs fewer than one batch")
        if d.n_test < 1:
            raise ConfigInvalid("data.n_test", "must be >= 1")
        needs_unpaired = any(m != "supervised" for m in self.methods())
        if needs_unpaired and d.n_unlabeled < self.train.m_unpaired_per_batch:
            raise ConfigInvalid("data.pool_size", "unlabeled images fewer than one batch")
        if self.eval.eval_every_epochs < 1:
            raise ConfigInvalid("eval.eval_every_epochs", "must be >= 1")
        if not self.eval.retrieval_ks or min(self.eval.retrieval_ks) < 1:
            raise ConfigInvalid("eval.retrieval_ks", "must be a non-empty list of k >= 1")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "data": dataclasses.asdict(self.data),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "output_dir": self.output_dir,
            "methods_to_compare": list(self.methods_to_compare),
            "summarize": self.summarize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"world", "data", "train", "eval", "output_dir", "methods_to_compare", "summarize"}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown field")
        try:
            world = WorldSpec.from_dict(d.get("world", {}))
        except (SpecInvalid, TypeError) as exc:
            raise ConfigInvalid("world", str(exc)) from None
        try:
            data = DataConfig(**d.get("data", {}))
        except TypeError as exc:
            raise ConfigInvalid("data", str(exc)) from None
        try:
            ev = EvalConfig(**d.get("eval", {}))
        except TypeError as exc:
            raise ConfigInvalid("eval", str(exc)) from None
        return cls(
            world=world,
            data=data,
            train=TrainConfig.from_dict(d.get("train", {})),
            eval=ev,
            output_dir=d.get("output_dir", "runs/default"),
            methods_to_compare=list(d.get("methods_to_compare", [])),
            summarize=bool(d.get("summarize", False)),
        )


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        path, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(path, "override must look like key=value")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(path, "cannot descend into a non-object")
        node[keys[-1]] = parsed
    return raw


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    return make_dataset(cfg.world, d.n_labeled, d.n_unlabeled, d.n_test)


# --- training ---------------------------------------------------------------------


def class_embeddings(params: EncoderParams, ds: Dataset) -> np.ndarray:
    return trainer.encode(params, ds.keyword_raw[ds.class_keyword], "text")


def evaluate_params(params: EncoderParams, ds: Dataset, ks=(1, 5)) -> EvalReport:
    imgs = trainer.encode(params, ds.test.images, "image")
    txts = trainer.encode(params, ds.test.texts[:, 0, :], "text")
    return evaluate(imgs, txts, class_embeddings(params, ds), ds.test.classes, ks)


class _Stream:
    """Index stream without replacement within a pass, reshuffled each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + k]
            out.append(chunk)
            self.pos += chunk.size
            k -= chunk.size
        return np.concatenate(out)


def iter_training(ds: Dataset, cfg: TrainConfig, eval_cfg: EvalConfig | None = None) -> Iterator[dict]:
    """Train one method and yield a record after every evaluation epoch.

    The final yielded record carries ``params`` and ``opt`` entries (not part
    of the metrics schema) holding the end-of-training state.
    """
    eval_cfg = eval_cfg or EvalConfig()
    n = cfg.n_paired_per_batch
    m = cfg.m_unpaired_per_batch if cfg.method != "supervised" else 0
    n_lab = len(ds.labeled)
    steps_per_epoch = n_lab // n
    cfg = dataclasses.replace(cfg, total_steps=steps_per_epoch * cfg.epochs)

    params = trainer.init_params(ds.labeled.images.shape[1], ds.keyword_raw.shape[1], cfg)
    opt = OptimizerState.for_params(params)
    pair_rng = np.random.default_rng([cfg.seed, 303])
    unl_rng = np.random.default_rng([cfg.seed, 404])
    cap_rng = np.random.default_rng([cfg.seed, 505])
    unl_stream = _Stream(len(ds.unlabeled), unl_rng) if m else None
    empty = np.zeros((0, ds.labeled.images.shape[1]))
    c = ds.labeled.captions_per_image

    for epoch in range(cfg.epochs):
        fixed_k = None
        if cfg.keyword_source_embeddings == "fixed":
            fixed_k = trainer.encode(params, ds.keyword_raw, "text")
        order = pair_rng.permutation(n_lab)
        sums = {"loss_clip": 0.0, "loss_caption": 0.0, "loss_keyword": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * n:(b + 1) * n]
            cap = cap_rng.integers(0, c, size=n) if c > 1 else np.zeros(n, dtype=np.intp)
            batch = Batch(
                images=ds.labeled.images[idx],
                texts=ds.labeled.texts[idx, cap, :],
                caption_keywords=[ds.labeled.caption_keywords[i][j] for i, j in zip(idx, cap)],
                unpaired=ds.unlabeled.images[unl_stream.take(m)] if m else empty,
                keyword_raw=ds.keyword_raw,
                fixed_keywords=fixed_k,
            )
            params, opt, sm = trainer.train_step(params, opt, batch, cfg)
            for key in sums:
                sums[key] += sm[key]
        last = epoch == cfg.epochs - 1
        if (epoch + 1) % eval_cfg.eval_every_epochs == 0 or last:
            report = evaluate_params(params, ds, eval_cfg.retrieval_ks)
            record = {
                "v": METRICS_VERSION,
                "method": cfg.method,
                "epoch": epoch + 1,
                "step": opt.step,
                **{k: v / max(steps_per_epoch, 1) for k, v in sums.items()},
                **report.flat(),
            }
            if last:
                record["params"] = params
                record["opt"] = opt
            yield record
        log.debug("epoch %d done (%s)", epoch + 1, cfg.method)


def train_and_evaluate(ds: Dataset, cfg: TrainConfig, eval_cfg: EvalConfig | None = None):
    """Run to completion; returns (metric records, final params, final optimizer state)."""
    records = list(iter_training(ds, cfg, eval_cfg))
    final = records[-1]
    params = final.pop("params")
    opt = final.pop("opt")
    return records, params, opt


def combined_score(record: dict) -> float:
    """Mean of zero-shot accuracy and the two R@1 directions' average."""
    r1 = 0.5 * (record["r_at_1_i2t"] + record["r_at_1_t2i"])
    return 0.5 * (record["zero_shot_top1"] + r1)
