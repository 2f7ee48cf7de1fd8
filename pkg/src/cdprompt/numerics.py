"""Small deterministic numerical kernels.

Matrices are plain ``float64`` numpy arrays; every function validates its
inputs and raises :class:`~cdprompt.errors.InvalidInput` or
:class:`~cdprompt.errors.DegenerateInput` instead of returning NaN.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, InvalidInput

KL_FLOOR = 1e-12


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray
    v_t: np.ndarray

    def reconstruct(self, rank=None):
        r = len(self.singular_values) if rank is None else rank
        return (self.u[:, :r] * self.singular_values[:r]) @ self.v_t[:r]


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def svd(m) -> SvdResult:
    """Thin SVD with r = min(rows, cols) and descending singular values."""
    a = as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt)


def tail_energy(singular_values, rank):
    """Frobenius error of the best rank-``rank`` approximation (Eckart-Young)."""
    s = np.asarray(singular_values, dtype=np.float64)
    return float(np.sqrt(np.sum(s[rank:] ** 2)))


def _as_distribution(p, name):
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise InvalidInput(f"{name} must be a non-empty vector")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} has negative or non-finite entries")
    if abs(a.sum() - 1.0) > 1e-9:
        raise InvalidInput(f"{name} sums to {a.sum()!r}, not 1")
    return a


def kl_divergence(p, q) -> float:
    """KL(p || q) with q clamped below at ``KL_FLOOR``; 0 log 0 is taken as 0."""
    p = _as_distribution(p, "p")
    q = _as_distribution(q, "q")
    if p.shape != q.shape:
        raise InvalidInput(f"length mismatch: {p.size} vs {q.size}")
    q = np.maximum(q, KL_FLOOR)
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            total += pi * np.log(pi / qi)
    return max(float(total), 0.0)


def kl_rows(p, q):
    """Row-wise KL(p_i || q_i) for batches of distributions (no validation)."""
    q = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise InvalidInput("pearson needs two 1-D arrays of equal length")
    if a.size < 2:
        raise InvalidInput("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise DegenerateInput("correlation undefined for a constant array")
    r = float(np.dot(da, db) / (sa * sb))
    return min(1.0, max(-1.0, r))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput("cosine needs vectors of equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInput("cosine undefined for a zero vector")
    return min(1.0, max(-1.0, float(np.dot(a, b) / (na * nb))))


def softmax(x, temperature=1.0, axis=-1):
    if not temperature > 0:
        raise InvalidInput("temperature must be positive")
    z = np.asarray(x, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise InvalidInput("softmax input must be finite")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateInput("cannot normalize a zero vector")
    return v / n
