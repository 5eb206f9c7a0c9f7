"""Contrastive and pseudo-label losses with analytic gradients.

Gradients are taken with respect to the unit-norm embedding matrices (and the
temperature). Pseudo-label targets are constants: nothing flows back through
them. Each loss returns a :class:`LossValue` whose ``grads`` mapping uses the
keys ``x``, ``y`` (paired image/text), ``u`` (unpaired images), ``k``
(keyword embeddings) and ``tau``; keys for inputs a loss does not depend on
are absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import as_matrix, log_softmax
from .errors import BadTemperature, BatchTooSmall, DimMismatch
from .pseudo import KeywordCatalog, PseudoLabelMatrix

CAPTION_WEIGHT = 0.5
KEYWORD_WEIGHT = 0.5


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)

    def scaled(self, w: float) -> "LossValue":
        return LossValue(w * self.value, {k: w * g for k, g in self.grads.items()})


def _check(a, b, tau):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if not tau > 0:
        raise BadTemperature(f"temperature must be positive, got {tau}")
    return a, b


def _backprop_logits(G, sim, a, b, tau, key_a, key_b) -> dict:
    """Push d(loss)/d(logits) back onto both embedding matrices and tau."""
    dsim = G / tau
    grads = {}
    if key_a is not None:
        grads[key_a] = dsim @ b
    if key_b is not None:
        grads[key_b] = dsim.T @ a
    grads["tau"] = float(-(G * sim).sum() / tau**2)
    return grads


def clip_loss(x, y, tau: float) -> LossValue:
    """Symmetric image-text contrastive loss over ``N`` aligned pairs."""
    x, y = _check(x, y, tau)
    n = x.shape[0]
    if y.shape[0] != n:
        raise DimMismatch(f"{n} images vs {y.shape[0]} texts")
    if n < 2:
        raise BatchTooSmall("contrastive loss needs at least two pairs")
    sim = x @ y.T
    logits = sim / tau
    log_rows = log_softmax(logits, axis=1)
    log_cols = log_softmax(logits, axis=0)
    diag = np.arange(n)
    value = -(log_rows[diag, diag].sum() + log_cols[diag, diag].sum()) / (2 * n)
    eye = np.eye(n)
    G = ((np.exp(log_rows) - eye) + (np.exp(log_cols) - eye)) / (2 * n)
    return LossValue(float(value), _backprop_logits(G, sim, x, y, tau, "x", "y"))


def _soft_target_ce(a, b, targets, active, tau, key_a, key_b) -> LossValue:
    """Mean over active rows of H(softmax(a_i . b / tau), targets_i)."""
    sim = a @ b.T
    count = int(active.sum())
    if count == 0:
        grads = {key_a: np.zeros_like(a), key_b: np.zeros_like(b), "tau": 0.0}
        return LossValue(0.0, grads)
    logits = sim / tau
    logp = log_softmax(logits, axis=1)
    t = np.where(active[:, None], targets, 0.0)
    value = -(t * logp).sum() / count
    G = (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / count
    return LossValue(float(value), _backprop_logits(G, sim, a, b, tau, key_a, key_b))


def _targets(q, shape) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(q, PseudoLabelMatrix):
        values, active = q.values, q.active
    else:
        values = as_matrix(q)
        active = np.ones(values.shape[0], dtype=bool)
    if values.shape != shape:
        raise DimMismatch(f"pseudo-labels have shape {values.shape}, expected {shape}")
    return values, active


def caption_loss(u, y, q, tau: float) -> LossValue:
    """Cross-entropy of unpaired-image-to-caption predictions against caption targets."""
    u, y = _check(u, y, tau)
    values, _ = _targets(q, (u.shape[0], y.shape[0]))
    return _soft_target_ce(u, y, values, np.ones(u.shape[0], dtype=bool), tau, "u", "y")


def _keyword_matrix(catalog) -> np.ndarray:
    if isinstance(catalog, KeywordCatalog):
        return catalog.embeddings
    return as_matrix(catalog)


def keyword_loss(u, catalog, qk, tau: float) -> LossValue:
    """Keyword-level loss; predictions span the full keyword set.

    Skipped rows (empty candidate sets) contribute nothing and are left out of
    the averaging denominator.
    """
    u, k = _check(u, _keyword_matrix(catalog), tau)
    values, active = _targets(qk, (u.shape[0], k.shape[0]))
    return _soft_target_ce(u, k, values, active, tau, "u", "k")


def hardmax_choice(u, k, candidates: Sequence[Sequence[int]]) -> list[int | None]:
    """Per row, the candidate keyword with the largest similarity (lowest index on ties)."""
    sim = as_matrix(u) @ as_matrix(k).T
    out = []
    for i, cand in enumerate(candidates):
        if len(cand) == 0:
            out.append(None)
            continue
        idx = np.asarray(sorted(cand), dtype=np.intp)
        out.append(int(idx[np.argmax(sim[i, idx])]))
    return out


def hardmax_keyword_loss(u, catalog, candidates, tau: float) -> LossValue:
    """Partial-label loss taking the minimum cross-entropy over one-hot candidates."""
    u, k = _check(u, _keyword_matrix(catalog), tau)
    if len(candidates) != u.shape[0]:
        raise DimMismatch("need one candidate set per unlabeled row")
    choice = hardmax_choice(u, k, candidates)
    targets = np.zeros((u.shape[0], k.shape[0]))
    active = np.zeros(u.shape[0], dtype=bool)
    for i, c in enumerate(choice):
        if c is not None:
            targets[i, c] = 1.0
            active[i] = True
    return _soft_target_ce(u, k, targets, active, tau, "u", "k")


def total_loss(
    clip: LossValue,
    caption: LossValue | None = None,
    keyword: LossValue | None = None,
) -> LossValue:
    """CLIP loss plus half of each pseudo-label loss; ``None`` terms are left out."""
    value = clip.value
    grads = {key: np.copy(g) if isinstance(g, np.ndarray) else g for key, g in clip.grads.items()}
    for term, w in ((caption, CAPTION_WEIGHT), (keyword, KEYWORD_WEIGHT)):
        if term is None:
            continue
        value += w * term.value
        for key, g in term.grads.items():
            grads[key] = grads[key] + w * g if key in grads else w * g
    return LossValue(float(value), grads)

