"""Pseudo-label targets for unpaired images.

Caption-level targets come from a transport plan (or from the Hard-PL and
Soft-PL nearest-neighbour baselines); keyword-level targets are sparse softmax
distributions over the keywords of the nearest labeled caption.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import as_matrix, check_unit_rows, cosine_matrix, softmax, softmax_rows
from .errors import BadTemperature, DegenerateRow, DimMismatch
from .sinkhorn import TransportPlan


@dataclass(frozen=True)
class PseudoLabelMatrix:
    values: np.ndarray
    skipped: np.ndarray = None
    support: list[list[int]] | None = None

    def __post_init__(self):
        if self.skipped is None:
            object.__setattr__(self, "skipped", np.zeros(self.values.shape[0], dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def active(self) -> np.ndarray:
        return ~self.skipped


@dataclass(frozen=True)
class KeywordCatalog:
    """Keyword embeddings plus, per labeled caption, the keywords it contains."""

    embeddings: np.ndarray
    caption_keywords: list[list[int]]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        k = self.embeddings.shape[0]
        for i, idx in enumerate(self.caption_keywords):
            if any(j < 0 or j >= k for j in idx):
                raise ValueError(f"caption {i} references a keyword outside [0, {k})")
            if list(idx) != sorted(set(idx)):
                raise ValueError(f"caption {i} keyword list must be sorted and duplicate-free")
        if self.names and len(self.names) != k:
            raise ValueError("names must have one entry per keyword")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def is_valid(self) -> bool:
        return check_unit_rows(self.embeddings)


def caption_pseudo_labels(plan: TransportPlan | np.ndarray) -> PseudoLabelMatrix:
    g = plan.values if isinstance(plan, TransportPlan) else as_matrix(plan)
    sums = g.sum(axis=1)
    bad = np.flatnonzero(~(sums > 1e-300))
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return PseudoLabelMatrix(g / sums[:, None])


def soft_pl(u, x, tau: float) -> PseudoLabelMatrix:
    """Soft nearest-neighbour targets: softmax of ``u_i . x_j / tau`` over j."""
    return PseudoLabelMatrix(softmax_rows(u, x, tau))


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def hard_pl(u, x) -> PseudoLabelMatrix:
    """One-hot targets at the most similar labeled image (lowest index on ties)."""
    sim = cosine_matrix(u, x)
    # np.argmax returns the first maximum, which is the tie rule we want
    return PseudoLabelMatrix(_one_hot(np.argmax(sim, axis=1), sim.shape[1]))


def nearest_labeled(plan: TransportPlan | np.ndarray) -> np.ndarray:
    g = plan.values if isinstance(plan, TransportPlan) else as_matrix(plan)
    return np.argmax(g, axis=1)


def keyword_candidates(catalog: KeywordCatalog, nearest: Sequence[int]) -> list[list[int]]:
    n = len(catalog.caption_keywords)
    out = []
    for i in nearest:
        if not 0 <= i < n:
            raise IndexError(f"nearest index {i} outside [0, {n})")
        out.append(list(catalog.caption_keywords[int(i)]))
    return out


def keyword_pseudo_labels(
    u, catalog: KeywordCatalog, candidates: Sequence[Sequence[int]], tau: float
) -> PseudoLabelMatrix:
    """Sparse targets: softmax over each row's candidate keywords, zero elsewhere.

    Rows with an empty candidate set are all-zero and flagged as skipped.
    """
    if not tau > 0:
        raise BadTemperature(f"temperature must be positive, got {tau}")
    u = as_matrix(u)
    if len(candidates) != u.shape[0]:
        raise DimMismatch("need one candidate set per unlabeled row")
    sim = cosine_matrix(u, catalog.embeddings)
    values = np.zeros_like(sim)
    skipped = np.zeros(u.shape[0], dtype=bool)
    for i, cand in enumerate(candidates):
        if len(cand) == 0:
            skipped[i] = True
            continue
        idx = np.asarray(cand, dtype=np.intp)
        values[i, idx] = softmax(sim[i, idx] / tau)
    return PseudoLabelMatrix(values, skipped, [list(c) for c in candidates])


def pseudo_embeddings(q: PseudoLabelMatrix | np.ndarray, y) -> np.ndarray:
    """Barycentres ``sum_j q_ij y_j``; rows are generally not unit norm."""
    qv = q.values if isinstance(q, PseudoLabelMatrix) else as_matrix(q)
    y = as_matrix(y)
    if qv.shape[1] != y.shape[0]:
        raise DimMismatch(f"{qv.shape[1]} pseudo-label columns vs {y.shape[0]} text rows")
    return qv @ y
