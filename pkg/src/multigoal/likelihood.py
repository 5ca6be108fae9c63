"""Residual likelihood of the variance component, adjustment factors and priors.

All quantities live on the log scale. The residual log-likelihood is

    l_RE(A) = -1/2 [ sum_i log(A + D_i) + log det(X'V^{-1}X) + y'Py ]

with the -(m - p)/2 log(2 pi) constant dropped. With ``P = V^{-1} - V^{-1}X(X'V^{-1}X)^{-1}X'V^{-1}``
and ``dV/dA = I`` the derivatives are

    l'   = -tr(P)/2   + y'P^2 y / 2
    l''  =  tr(P^2)/2 - y'P^3 y
    l''' = -tr(P^3)   + 3 y'P^4 y.

Traces of powers of P are expanded in p x p products of ``X'W^k X`` so the
cost stays O(m p^2) per evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import AreaLevelDataset, DomainError, SingularDesignError, _check_A


class AdjustmentError(ValueError):
    """An adjustment or prior evaluated to a non-finite value where it must be finite."""


# ---------------------------------------------------------------------------
# Residual likelihood engine
# ---------------------------------------------------------------------------

def _tr(M):
    return np.trace(M, axis1=-2, axis2=-1)


def cross_moments(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``X' diag(w) X`` for every leading index of ``w`` (one matmul)."""
    m, p = X.shape
    XX = (X[:, :, None] * X[:, None, :]).reshape(m, p * p)
    return (w @ XX).reshape(w.shape[:-1] + (p, p))


def reml_terms(X: np.ndarray, D: np.ndarray, y, A, order: int = 0) -> dict:
    """Vectorised residual-likelihood terms.

    ``A`` has shape ``S`` and ``y`` shape ``S' + (m,)`` with ``S`` and ``S'``
    broadcastable. Returns a dict holding ``l`` (log-likelihood), ``beta``,
    ``cov`` (``(X'WX)^{-1}``) and ``d1``..``d{order}`` derivatives.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 / (A[..., None] + D)
    F = cross_moments(X, w)
    sign, logdet = np.linalg.slogdet(F)
    if np.any(sign <= 0):
        raise SingularDesignError(np.inf)
    C = np.linalg.inv(F)
    b = (w * y) @ X
    beta = np.einsum("...pq,...q->...p", C, b)
    Py = w * (y - beta @ X.T)
    ypy = np.sum(y * Py, axis=-1)
    out = {
        "l": -0.5 * (np.sum(np.log(A[..., None] + D), axis=-1) + logdet + ypy),
        "beta": beta,
        "cov": C,
        "w": w,
    }
    if order == 0:
        return out

    def P(v):
        return w * (v - np.einsum("...pq,...q->...p", C, (w * v) @ X) @ X.T)

    G = {k: cross_moments(X, w**k) for k in range(2, order + 2)}
    CG2 = C @ G[2]
    trP = np.sum(w, axis=-1) - _tr(CG2)
    out["d1"] = -0.5 * trP + 0.5 * np.sum(Py * Py, axis=-1)
    out["trP"] = trP
    if order >= 2:
        P2y = P(Py)
        trP2 = np.sum(w**2, axis=-1) - 2.0 * _tr(C @ G[3]) + _tr(CG2 @ CG2)
        out["d2"] = 0.5 * trP2 - np.sum(Py * P2y, axis=-1)
    if order >= 3:
        trP3 = (np.sum(w**3, axis=-1) - 3.0 * _tr(C @ G[4])
                + 3.0 * _tr(CG2 @ (C @ G[3])) - _tr(CG2 @ CG2 @ CG2))
        out["d3"] = -trP3 + 3.0 * np.sum(P2y * P2y, axis=-1)
    return out


def reml_grid(X: np.ndarray, D: np.ndarray, Y: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """``l_RE`` for every row of ``Y`` (R x m) at every grid value (K,): an R x K array.

    Uses matrix products against the K x m weight matrix so nothing of size
    R x K x m is allocated.
    """
    w = 1.0 / (grid[:, None] + D)
    F = cross_moments(X, w)
    sign, logdet = np.linalg.slogdet(F)
    C = np.linalg.inv(F)
    yWy = (Y * Y) @ w.T
    b = np.stack([(Y * X[:, q]) @ w.T for q in range(X.shape[1])], axis=-1)
    quad = np.einsum("rkp,kpq,rkq->rk", b, C, b)
    const = np.sum(np.log(grid[:, None] + D), axis=-1) + logdet
    return -0.5 * (const[None, :] + yWy - quad)


def log_residual_likelihood(data: AreaLevelDataset, A):
    """Residual log-likelihood of ``A`` (vectorised over ``A``).

    The additive constant -(m - p)/2 log(2 pi) is omitted.
    """
    A = _check_A(A)
    l = reml_terms(data.X, data.D, data.y, A)["l"]
    return float(l) if np.ndim(l) == 0 else l


def log_residual_likelihood_derivative(data: AreaLevelDataset, A, order: int = 1):
    """Analytic ``d^k l_RE / dA^k`` for k in {1, 2, 3}, defined for A > 0."""
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    A = _check_A(A, strict=True)
    d = reml_terms(data.X, data.D, data.y, A, order=order)[f"d{order}"]
    return float(d) if np.ndim(d) == 0 else d


# ---------------------------------------------------------------------------
# Adjustment factors
# ---------------------------------------------------------------------------

def _area_D(data: AreaLevelDataset, area):
    if area is None:
        raise ValueError("this adjustment is area specific; pass an area index")
    return data.D[np.asarray(area, dtype=int)]


def log_h_plus(data: AreaLevelDataset, A):
    """Default ``log h_+(A) = (1/m) log arctan(sum_j A / (A + D_j))``.

    Zero at A = 0 (log value -inf), positive and bounded by (pi/2)^{1/m} above.
    """
    A = np.asarray(A, dtype=float)
    T = np.sum(A[..., None] / (A[..., None] + data.D), axis=-1)
    with np.errstate(divide="ignore"):
        return np.log(np.arctan(T)) / data.m


def log_h_plus_derivative(data: AreaLevelDataset, A):
    A = np.asarray(A, dtype=float)
    T = np.sum(A[..., None] / (A[..., None] + data.D), axis=-1)
    dT = np.sum(data.D / (A[..., None] + data.D) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return dT / ((1.0 + T * T) * np.arctan(T)) / data.m


@dataclass(frozen=True)
class AdjustmentSpec:
    """Adjustment factor ``h(A)`` multiplying the residual likelihood.

    kinds: ``"none"`` (REML), ``"ml"`` (turns REML into ML),
    ``"power"`` (``(A + D_i)^s``), ``"multigoal"`` (``h_+(A)(A + D_i)``) and
    ``"custom"``. Custom callables are called as ``f(data, A, area)`` with
    array ``A`` and must return log h and its first A-derivative.
    """

    kind: str = "none"
    s: float = 0.0
    area: int | None = None
    log_h: Callable | None = None
    dlog_h: Callable | None = None
    custom_area_specific: bool = False
    custom_zero_at_origin: bool = False

    KINDS = ("none", "ml", "power", "multigoal", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown adjustment kind {self.kind!r}")
        if self.kind == "power" and not self.s > 0:
            raise ValueError(f"power adjustment needs s > 0, got {self.s!r}")
        if self.kind == "custom" and (self.log_h is None or self.dlog_h is None):
            raise ValueError("custom adjustment needs log_h and dlog_h callables")

    @classmethod
    def reml(cls):
        return cls("none")

    @classmethod
    def ml(cls):
        return cls("ml")

    @classmethod
    def power(cls, s: float, area: int | None = None):
        return cls("power", s=float(s), area=area)

    @classmethod
    def multigoal(cls, area: int | None = None):
        return cls("multigoal", area=area)

    @classmethod
    def custom(cls, log_h, dlog_h, area=None, area_specific=False, zero_at_origin=False):
        return cls("custom", area=area, log_h=log_h, dlog_h=dlog_h,
                   custom_area_specific=area_specific, custom_zero_at_origin=zero_at_origin)

    @property
    def area_specific(self) -> bool:
        return self.kind in ("power", "multigoal") or self.custom_area_specific

    @property
    def vanishes_at_zero(self) -> bool:
        return self.kind == "multigoal" or self.custom_zero_at_origin

    def for_area(self, i: int) -> "AdjustmentSpec":
        return self.__class__(**{**self.__dict__, "area": int(i)})

    def describe(self) -> str:
        if self.kind == "power":
            return f"power(s={self.s!r})"
        return self.kind


def _check_custom(val, A, what):
    val = np.asarray(val, dtype=float)
    if np.any(~np.isfinite(val) & (np.broadcast_to(A, val.shape) > 0)):
        raise AdjustmentError(f"custom {what} returned a non-finite value")
    return val


def _ml_terms(data, A):
    w = 1.0 / (np.asarray(A, dtype=float)[..., None] + data.D)
    return w, cross_moments(data.X, w)


def log_adjustment(spec: AdjustmentSpec, data: AreaLevelDataset, A, area=None):
    """``log h(A)``; ``area`` overrides ``spec.area`` and may be an index array."""
    A = _check_A(A)
    area = spec.area if area is None else area
    if spec.kind == "none":
        val = np.zeros_like(A)
    elif spec.kind == "ml":
        val = 0.5 * np.linalg.slogdet(_ml_terms(data, A)[1])[1]
    elif spec.kind == "power":
        val = spec.s * np.log(A + _area_D(data, area))
    elif spec.kind == "multigoal":
        val = log_h_plus(data, A) + np.log(A + _area_D(data, area))
    else:
        val = _check_custom(spec.log_h(data, A, area), A, "log_h")
    return float(val) if np.ndim(val) == 0 else val


def log_adjustment_derivative(spec: AdjustmentSpec, data: AreaLevelDataset, A, area=None):
    """``d log h / dA``."""
    A = _check_A(A)
    area = spec.area if area is None else area
    if spec.kind == "none":
        val = np.zeros_like(A)
    elif spec.kind == "ml":
        w, F = _ml_terms(data, A)
        G2 = cross_moments(data.X, w**2)
        val = -0.5 * _tr(np.linalg.solve(F, G2))
    elif spec.kind == "power":
        val = spec.s / (A + _area_D(data, area))
    elif spec.kind == "multigoal":
        val = log_h_plus_derivative(data, A) + 1.0 / (A + _area_D(data, area))
    else:
        val = _check_custom(spec.dlog_h(data, A, area), A, "dlog_h")
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# Priors on A
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Prior density on A, known up to a constant (beta always gets a flat prior).

    kinds: ``"flat"``; ``"multigoal"`` with ``pi_i(A) ~ (A + D_i)^2 tr[V^-2]``;
    ``"general_mg"`` with ``h(A)(A + D_i) tr[V^-2]`` for an adjustment ``h``;
    ``"weighted_trace"`` with ``sum (A+D_i)^-2 / sum w_i D_i^2 (A+D_i)^-2``.
    """

    kind: str = "flat"
    area: int | None = None
    adjustment: AdjustmentSpec | None = None
    weights: tuple[float, ...] | None = None

    KINDS = ("flat", "multigoal", "general_mg", "weighted_trace")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "general_mg" and self.adjustment is None:
            raise ValueError("general_mg prior needs an adjustment")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("weighted-trace weights must be nonnegative and sum to 1")

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def multigoal(cls, area: int | None = None):
        return cls("multigoal", area=area)

    @classmethod
    def general_mg(cls, adjustment: AdjustmentSpec, area: int | None = None):
        return cls("general_mg", area=area, adjustment=adjustment)

    @classmethod
    def weighted_trace(cls, weights=None):
        return cls("weighted_trace", weights=None if weights is None else tuple(map(float, weights)))

    @property
    def area_specific(self) -> bool:
        return self.kind in ("multigoal", "general_mg")

    def for_area(self, i: int) -> "PriorSpec":
        return self.__class__(**{**self.__dict__, "area": int(i)})

    def describe(self) -> str:
        if self.kind == "general_mg":
            return f"general_mg[{self.adjustment.describe()}]"
        return self.kind

    def _weights(self, data):
        if self.weights is None:
            return np.full(data.m, 1.0 / data.m)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (data.m,):
            raise ValueError(f"expected {data.m} weighted-trace weights, got {w.size}")
        return w


def _tr_v(data, A, k):
    return np.sum((A[..., None] + data.D) ** (-k), axis=-1)


def log_prior(spec: PriorSpec, data: AreaLevelDataset, A, area=None):
    """log prior density of A up to an additive constant."""
    A = _check_A(A)
    area = spec.area if area is None else area
    with np.errstate(divide="ignore"):
        if spec.kind == "flat":
            val = np.zeros_like(A)
        elif spec.kind == "multigoal":
            val = 2.0 * np.log(A + _area_D(data, area)) + np.log(_tr_v(data, A, 2))
        elif spec.kind == "general_mg":
            val = (log_adjustment(spec.adjustment, data, A, area)
                   + np.log(A + _area_D(data, area)) + np.log(_tr_v(data, A, 2)))
        else:
            w = spec._weights(data)
            num = _tr_v(data, A, 2)
            den = np.sum(w * data.D**2 / (A[..., None] + data.D) ** 2, axis=-1)
            val = np.log(num) - np.log(den)
    val = np.asarray(val, dtype=float)
    if np.any(np.isnan(val)) or np.any(np.isposinf(val)):
        raise AdjustmentError(f"{spec.describe()} prior is not finite")
    return float(val) if val.ndim == 0 else val


def log_prior_derivative(spec: PriorSpec, data: AreaLevelDataset, A, area=None):
    """``rho_1(A) = d log pi(A) / dA``."""
    A = _check_A(A)
    area = spec.area if area is None else area
    ratio = _tr_v(data, A, 3) / _tr_v(data, A, 2)
    if spec.kind == "flat":
        val = np.zeros_like(A)
    elif spec.kind == "multigoal":
        val = 2.0 / (A + _area_D(data, area)) - 2.0 * ratio
    elif spec.kind == "general_mg":
        val = (log_adjustment_derivative(spec.adjustment, data, A, area)
               + 1.0 / (A + _area_D(data, area)) - 2.0 * ratio)
    else:
        w = spec._weights(data)
        V = A[..., None] + data.D
        den = np.sum(w * data.D**2 / V**2, axis=-1)
        dden = -2.0 * np.sum(w * data.D**2 / V**3, axis=-1)
        val = -2.0 * ratio - dden / den
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# Propriety
# ---------------------------------------------------------------------------

class Propriety(NamedTuple):
    proper_as_raw_adjustment: bool
    proper_as_general_mg_prior: bool


def check_propriety(s: float, m: int, p: int) -> Propriety:
    """Sufficient conditions for a proper posterior with ``h(A) = (A + D_i)^s``.

    Used directly as a prior, ``h`` needs ``s < (m - p - 2)/2``; inside the
    general multi-goal prior it needs ``s < (m - p)/2``. Both inequalities are
    strict, so equality reports False.
    """
    if not (m > p >= 1):
        raise ValueError(f"need m > p >= 1, got m={m}, p={p}")
    if not s > 0:
        raise ValueError(f"s must be positive, got {s!r}")
    return Propriety(bool(s < (m - p - 2) / 2), bool(s < (m - p) / 2))


def check_propriety_spec(spec: AdjustmentSpec, m: int, p: int) -> Propriety:
    """Propriety check for an adjustment spec; only the power family is covered."""
    if spec.kind != "power":
        raise ValueError(
            f"propriety is only characterised for power adjustments, not {spec.describe()}; "
            "rely on the posterior tail detector instead")
    return check_propriety(spec.s, m, p)


__all__ = [
    "AdjustmentError", "AdjustmentSpec", "PriorSpec", "Propriety", "DomainError",
    "check_propriety", "check_propriety_spec", "log_adjustment", "log_adjustment_derivative",
    "log_h_plus", "log_h_plus_derivative", "log_prior", "log_prior_derivative",
    "log_residual_likelihood", "log_residual_likelihood_derivative", "reml_grid", "reml_terms",
]
