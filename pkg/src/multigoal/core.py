"""Data container and closed-form building blocks of the two-level normal model.

Everything here works on the diagonal covariance ``V = diag(A + D_i)``
directly; no m x m matrix is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Largest acceptable condition number of X'V^{-1}X before a solve is refused.
MAX_CONDITION = 1e12


class DomainError(ValueError):
    """Argument outside the domain of a formula (e.g. D <= 0, A < 0)."""


class SingularDesignError(np.linalg.LinAlgError):
    """X'V^{-1}X is numerically singular."""

    def __init__(self, condition: float, what: str = "X'V^-1 X"):
        self.condition = condition
        super().__init__(
            f"{what} is singular or ill-conditioned "
            f"(condition number {condition:.3e} > {MAX_CONDITION:.0e})"
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AreaLevelDataset:
    """Direct estimates ``y`` with known sampling variances ``D`` and covariates ``X``.

    Arrays are copied and made read-only on construction. ``X`` may be given
    as a 1-d array, in which case it is treated as a single column.
    """

    y: np.ndarray
    D: np.ndarray
    X: np.ndarray
    area_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        D = np.asarray(self.D, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or D.shape != y.shape:
            raise ValueError(f"y and D must be vectors of equal length, got {y.shape} and {D.shape}")
        m = y.shape[0]
        if X.ndim != 2 or X.shape[0] != m:
            raise ValueError(f"X must be an {m} x p matrix, got shape {X.shape}")
        if m == 0:
            raise ValueError("dataset has no areas")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(D)) and np.all(np.isfinite(X))):
            raise ValueError("y, D and X must be finite")
        if np.any(D <= 0):
            bad = int(np.flatnonzero(D <= 0)[0])
            raise DomainError(f"sampling variance D[{bad}] = {D[bad]!r} is not positive")
        p = X.shape[1]
        if p > m:
            raise ValueError(f"more covariates (p={p}) than areas (m={m})")
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] <= sv[0] * 1e-10:
            raise SingularDesignError(float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf, what="X")
        ids = tuple(str(a) for a in self.area_ids) if len(self.area_ids) else tuple(
            str(k + 1) for k in range(m))
        if len(ids) != m:
            raise ValueError(f"{len(ids)} area ids for {m} areas")
        if len(set(ids)) != m:
            raise ValueError("area ids must be unique")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "D", _frozen(D))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "area_ids", ids)

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_y(self, y) -> "AreaLevelDataset":
        """Same design and sampling variances, new direct estimates."""
        return AreaLevelDataset(y, self.D, self.X, self.area_ids)

    def permuted(self, order: Sequence[int]) -> "AreaLevelDataset":
        order = np.asarray(order, dtype=int)
        return AreaLevelDataset(self.y[order], self.D[order], self.X[order],
                                tuple(self.area_ids[k] for k in order))

    def index_of(self, area_id: str) -> int:
        return self.area_ids.index(str(area_id))


@dataclass(frozen=True)
class Hyperparameters:
    beta: np.ndarray
    A: float

    def __post_init__(self):
        if not self.A >= 0:
            raise DomainError(f"A must be nonnegative, got {self.A!r}")
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))


def _check_A(A, strict: bool = False) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    bad = ~(A > 0) if strict else ~(A >= 0)
    if np.any(bad):
        raise DomainError(f"A must be {'positive' if strict else 'nonnegative'}, got {A[bad].ravel()[0]!r}")
    return A


def shrinkage(A, D):
    """Shrinkage factor ``B = D / (A + D)``; broadcasts over arrays."""
    D = np.asarray(D, dtype=float)
    if np.any(~(D > 0)):
        raise DomainError("sampling variance must be positive")
    A = _check_A(A)
    B = D / (A + D)
    return float(B) if B.ndim == 0 else B


def trace_v_inv_pow(data: AreaLevelDataset, A, k: int):
    """``tr[V^{-k}] = sum_i (A + D_i)^{-k}`` for k in {1, 2, 3}."""
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    A = _check_A(A)
    t = np.sum((A[..., None] + data.D) ** (-k), axis=-1)
    return float(t) if t.ndim == 0 else t


def _weighted_svd(X, w):
    """SVD of W^{1/2} X with the condition number of X'WX."""
    U, s, Vt = np.linalg.svd(np.sqrt(w)[:, None] * X, full_matrices=False)
    cond = np.inf if s[-1] == 0 else float((s[0] / s[-1]) ** 2)
    if cond > MAX_CONDITION:
        raise SingularDesignError(cond)
    return U, s, Vt


def _gls_weights(data: AreaLevelDataset, w: np.ndarray):
    U, s, Vt = _weighted_svd(data.X, w)
    beta = Vt.T @ ((U.T @ (np.sqrt(w) * data.y)) / s)
    cov = (Vt.T / s**2) @ Vt
    cov = 0.5 * (cov + cov.T)
    return beta, cov


def gls_beta(data: AreaLevelDataset, A: float) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares ``beta(A)`` and its covariance ``(X'V^{-1}X)^{-1}``.

    Raises:
        SingularDesignError: if X'V^{-1}X has condition number above
            ``MAX_CONDITION``; the offending value is attached as ``.condition``.
    """
    A = float(_check_A(A))
    return _gls_weights(data, 1.0 / (A + data.D))


def gls_beta_heterogeneous(data: AreaLevelDataset, A_vec) -> np.ndarray:
    """GLS with the plug-in covariance ``diag(A_vec_i + D_i)``."""
    A_vec = np.asarray(A_vec, dtype=float)
    if A_vec.shape != (data.m,):
        raise ValueError(f"A_vec must have length {data.m}")
    _check_A(A_vec, strict=True)
    return _gls_weights(data, 1.0 / (A_vec + data.D))[0]


def regression_fit(data: AreaLevelDataset, A_vec, mode: str = "diagonal") -> np.ndarray:
    """Synthetic regression values ``x_i' beta`` under area-specific variance estimates.

    ``mode="diagonal"`` uses one beta from ``diag(A_vec_i + D_i)``;
    ``mode="per_area"`` gives area i the value ``x_i' beta(A_vec_i)``.
    """
    A_vec = np.asarray(A_vec, dtype=float)
    if mode == "diagonal":
        return data.X @ gls_beta_heterogeneous(data, A_vec)
    if mode == "per_area":
        return np.array([data.X[i] @ gls_beta(data, A_vec[i])[0] for i in range(data.m)])
    raise ValueError(f"unknown beta mode {mode!r}")


def blup(data: AreaLevelDataset, A: float, i: int | None = None):
    """BLUP ``(1 - B_i) y_i + B_i x_i' beta(A)``; all areas when ``i`` is None."""
    beta, _ = gls_beta(data, A)
    B = shrinkage(A, data.D)
    theta = (1.0 - B) * data.y + B * (data.X @ beta)
    return theta if i is None else float(theta[i])
