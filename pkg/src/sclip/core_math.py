"""Dense-vector primitives: row normalization, cosine similarity,
temperature softmax and cross-entropy.

All arrays are float64 and treated as immutable; every function returns a new
array.
"""

from __future__ import annotations

import numpy as np

from .errors import BadTemperature, DimMismatch, LengthMismatch, NonFinite, ZeroRow

ZERO_NORM = 1e-12
LOG_CLAMP = 1e-12


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimMismatch(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def normalize_rows(m) -> np.ndarray:
    """Scale every row of ``m`` to unit Euclidean norm.

    Raises :class:`ZeroRow` for a row whose norm is at most 1e-12 and
    :class:`NonFinite` when the input holds NaN or infinity.
    """
    a = as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix contains NaN or infinity")
    with np.errstate(over="ignore"):
        norms = np.linalg.norm(a, axis=1)
    if not np.all(np.isfinite(norms)):
        raise NonFinite(f"row {int(np.flatnonzero(~np.isfinite(norms))[0])} norm overflows")
    bad = np.flatnonzero(norms <= ZERO_NORM)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    return a / norms[:, None]


def check_unit_rows(m, atol: float = 1e-6) -> bool:
    a = as_matrix(m)
    return bool(np.all(np.isfinite(a)) and np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=atol))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise dot products of unit rows: entry (i, j) is ``a_i . b_j``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


def _check_tau(tau: float) -> None:
    if not (tau > 0 and np.isfinite(tau)):
        raise BadTemperature(f"temperature must be positive, got {tau}")


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_classifier(query, targets, tau: float) -> np.ndarray:
    """Probability of ``query`` matching each target row at temperature ``tau``."""
    _check_tau(tau)
    q = np.asarray(query, dtype=np.float64).ravel()
    t = as_matrix(targets)
    if q.shape[0] != t.shape[1]:
        raise DimMismatch(f"query dim {q.shape[0]} vs target dim {t.shape[1]}")
    return softmax(t @ q / tau)


def softmax_rows(queries, targets, tau: float) -> np.ndarray:
    """Row-wise :func:`softmax_classifier` for a whole matrix of queries."""
    _check_tau(tau)
    return softmax(cosine_matrix(queries, targets) / tau, axis=1)


def cross_entropy(pred, target) -> float:
    """``-sum(target * log(pred))`` with ``pred`` clamped below at 1e-12."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"length mismatch: {p.shape[0]} vs {t.shape[0]}")
    return float(-(t * np.log(np.maximum(p, LOG_CLAMP))).sum())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
