"""Zero-shot Top-1 accuracy and retrieval recall@K, in percent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import cosine_matrix
from .errors import DimMismatch, KTooLarge


@dataclass
class EvalReport:
    zero_shot_top1: float
    retrieval: dict = field(default_factory=dict)   # (direction, k) -> recall %
    n_queries: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = {"zero_shot_top1": self.zero_shot_top1}
        for (direction, k), v in sorted(self.retrieval.items()):
            out[f"r_at_{k}_{direction}"] = v
        return out


def _ranks(sim: np.ndarray, correct: np.ndarray) -> np.ndarray:
    """0-based rank of the correct item under (similarity desc, index asc) ordering."""
    target = sim[np.arange(sim.shape[0]), correct][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > target) | ((sim == target) & (cols < correct[:, None]))
    return ahead.sum(axis=1)


def zero_shot_accuracy(image_embs, class_embs, labels) -> float:
    labels = np.asarray(labels, dtype=np.intp)
    sim = cosine_matrix(image_embs, class_embs)
    if sim.shape[0] != labels.shape[0]:
        raise DimMismatch(f"{sim.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= sim.shape[1]):
        raise IndexError("label outside the class range")
    pred = np.argmax(sim, axis=1)
    return float(100.0 * np.mean(pred == labels))


def retrieval_recall(queries, gallery, correct, k: int) -> float:
    correct = np.asarray(correct, dtype=np.intp)
    sim = cosine_matrix(queries, gallery)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > sim.shape[1]:
        raise KTooLarge(f"k={k} exceeds gallery size {sim.shape[1]}")
    if sim.shape[0] != correct.shape[0]:
        raise DimMismatch(f"{sim.shape[0]} queries vs {correct.shape[0]} answers")
    return float(100.0 * np.mean(_ranks(sim, correct) < k))


def evaluate(image_embs, text_embs, class_embs, labels, ks=(1, 5)) -> EvalReport:
    """Zero-shot accuracy plus image->text and text->image recall for aligned pairs."""
    n = image_embs.shape[0]
    ids = np.arange(n)
    sim = cosine_matrix(image_embs, text_embs)
    retrieval = {}
    for k in ks:
        k_eff = min(k, n)
        retrieval[("i2t", k)] = float(100.0 * np.mean(_ranks(sim, ids) < k_eff))
        retrieval[("t2i", k)] = float(100.0 * np.mean(_ranks(sim.T, ids) < k_eff))
    return EvalReport(
        zero_shot_accuracy(image_embs, class_embs, labels),
        retrieval,
        {"zero_shot": n, "i2t": n, "t2i": n},
    )
