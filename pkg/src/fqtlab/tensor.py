"""Small dense linear-algebra helpers on float64 matrices."""

from __future__ import annotations

import numpy as np

POWER_ITER_CAP = 1000
POWER_ITER_TOL = 1e-12
EXHAUSTIVE_SVD_MAX_DIM = 8
_START_SEED = 20201016


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array or raise."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _nonempty(m, name="matrix"):
    a = as_matrix(m, name)
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def dynamic_range(m) -> float:
    """max(m) - min(m)."""
    a = _nonempty(m)
    return float(a.max() - a.min())


def dynamic_range_rows(m) -> np.ndarray:
    a = _nonempty(m)
    return a.max(axis=1) - a.min(axis=1)


def frobenius_norm_sq(m) -> float:
    a = as_matrix(m)
    return float(np.sum(a * a))


def operator_norm_sq(m) -> float:
    """Largest squared singular value.

    Matrices whose smaller side is at most 8 go through a full SVD; larger ones
    use power iteration on m^T m from a fixed start vector.
    """
    a = _nonempty(m)
    if min(a.shape) <= EXHAUSTIVE_SVD_MAX_DIM:
        return float(np.linalg.svd(a, compute_uv=False)[0] ** 2)
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    v = np.random.default_rng(_START_SEED).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(POWER_ITER_CAP):
        w = gram @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= POWER_ITER_TOL * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    return float(v @ gram @ v)
