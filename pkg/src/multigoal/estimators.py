"""Adjusted maximum likelihood estimation of A and the resulting EBLUPs.

The maximiser scans a fixed logarithmic lattice (16 points per decade, plus
A = 0 when the boundary is allowed), brackets the best lattice point by its
neighbours and bisects the analytic gradient inside the bracket. Every row of
a batch is handled independently, so the same code fits one dataset, all
area-specific adjustments of one dataset, or thousands of bootstrap samples.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .core import (AreaLevelDataset, blup, gls_beta, gls_beta_heterogeneous, regression_fit,
                   shrinkage, trace_v_inv_pow)
from .likelihood import (AdjustmentSpec, log_adjustment, log_adjustment_derivative,
                         reml_grid, reml_terms)

LATTICE_PER_DECADE = 16
LATTICE_DECADES = 12
CHUNK_ELEMENTS = 2_000_000
BOUNDARY_POLICIES = ("allow_zero", "strictly_positive")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitMethod:
    """Adjustment plus search settings.

    ``boundary_policy`` defaults to ``strictly_positive`` for adjustments that
    vanish at A = 0 (multi-goal) and ``allow_zero`` otherwise.
    """

    adjustment: AdjustmentSpec = field(default_factory=AdjustmentSpec)
    search_bound_factor: float = 100.0
    boundary_policy: str | None = None
    max_escalations: int = 2

    def __post_init__(self):
        policy = self.boundary_policy
        if policy is None:
            policy = "strictly_positive" if self.adjustment.vanishes_at_zero else "allow_zero"
            object.__setattr__(self, "boundary_policy", policy)
        if policy not in BOUNDARY_POLICIES:
            raise ValueError(f"unknown boundary policy {policy!r}")
        if self.adjustment.vanishes_at_zero and policy != "strictly_positive":
            raise ValueError("an adjustment vanishing at A = 0 needs boundary_policy='strictly_positive'")
        if not self.search_bound_factor > 0:
            raise ValueError("search_bound_factor must be positive")

    @classmethod
    def reml(cls, **kw):
        return cls(AdjustmentSpec.reml(), **kw)

    @classmethod
    def ml(cls, **kw):
        return cls(AdjustmentSpec.ml(), **kw)

    @classmethod
    def power(cls, s: float, **kw):
        return cls(AdjustmentSpec.power(s), **kw)

    @classmethod
    def multigoal(cls, **kw):
        return cls(AdjustmentSpec.multigoal(), **kw)

    @property
    def allow_zero(self) -> bool:
        return self.boundary_policy == "allow_zero"

    def describe(self) -> str:
        return self.adjustment.describe()


@dataclass(frozen=True)
class MaximizerDiagnostics:
    status: str          # interior | zero | upper_bound | lower_bound
    iterations: int
    bracket: tuple[float, float]
    objective: float
    gradient: float
    curvature: float
    A_max: float
    escalations: int

    def as_dict(self) -> dict:
        return {**self.__dict__, "bracket": list(self.bracket)}


def _check_method(data: AreaLevelDataset, method: FitMethod):
    if method.adjustment.kind == "multigoal" and not data.m > data.p + 2:
        raise ValueError(f"multi-goal estimation needs m > p + 2 (m={data.m}, p={data.p})")


def _lattice(lo: float, hi: float) -> np.ndarray:
    j0 = int(np.floor(LATTICE_PER_DECADE * np.log10(lo)))
    j1 = int(np.floor(LATTICE_PER_DECADE * np.log10(hi)))
    return 10.0 ** (np.arange(j0, j1 + 1) / LATTICE_PER_DECADE)


class _Rows:
    """Objective and gradient for paired (row, A) evaluations."""

    def __init__(self, data, Y, method, areas):
        self.data, self.Y, self.method, self.areas = data, Y, method, areas
        self.adj = method.adjustment

    def _area(self, idx):
        return None if self.areas is None else self.areas[idx]

    def gradient(self, idx, A):
        t = reml_terms(self.data.X, self.data.D, self.Y[idx], A, order=1)
        return t["d1"] + log_adjustment_derivative(self.adj, self.data, A, self._area(idx))

    def objective(self, idx, A):
        t = reml_terms(self.data.X, self.data.D, self.Y[idx], A)
        with np.errstate(divide="ignore"):
            return t["l"] + log_adjustment(self.adj, self.data, A, self._area(idx))

    def grid(self, idx, pts):
        obj = reml_grid(self.data.X, self.data.D, self.Y[idx], pts)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.areas is None:
                obj = obj + log_adjustment(self.adj, self.data, pts)[None, :]
            else:
                obj = obj + log_adjustment(self.adj, self.data, pts[None, :], self.areas[idx][:, None])
        return np.where(np.isfinite(obj), obj, -np.inf)


def _scan(rows: _Rows, idx, amax, allow_zero):
    """Best lattice point per row; returns the initial bracket and a zero-boundary mask."""
    pts = _lattice(amax.min() * 10.0**-LATTICE_DECADES, amax.max())
    if allow_zero:
        pts = np.concatenate([[0.0], pts])
    valid = (pts[None, :] <= amax[:, None]) & (pts[None, :] >= amax[:, None] * 10.0**-LATTICE_DECADES)
    if allow_zero:
        valid[:, 0] = True
    lo = np.empty(idx.size)
    hi = np.empty(idx.size)
    best = np.empty(idx.size, dtype=int)
    top = np.zeros(idx.size, dtype=bool)
    step = max(1, CHUNK_ELEMENTS // (pts.size * rows.data.p))
    for s in range(0, idx.size, step):
        sl = slice(s, s + step)
        obj = rows.grid(idx[sl], pts)
        obj[~valid[sl]] = -np.inf
        best[sl] = np.argmax(obj, axis=1)
        if np.any(~np.isfinite(obj[np.arange(obj.shape[0]), best[sl]])):
            raise EstimationError("objective is not finite anywhere on the search bracket")
    first = np.argmax(valid, axis=1)
    last = valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    zero = allow_zero & (best == 0)
    for r in range(idx.size):
        k = best[r]
        lo[r] = pts[k - 1] if k > first[r] else (0.0 if allow_zero else pts[k] * 1e-3)
        if k < last[r]:
            hi[r] = pts[k + 1]
        else:
            hi[r] = amax[r]
            top[r] = True
        if zero[r]:
            lo[r], hi[r] = 0.0, pts[1] if valid[r, 1] else amax[r]
    return lo, hi, zero, top


def _bisect(rows: _Rows, idx, lo, hi):
    lo, hi = lo.copy(), hi.copy()
    iters = np.zeros(idx.size, dtype=int)
    active = np.ones(idx.size, dtype=bool)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        active &= (mid > lo) & (mid < hi)
        if not active.any():
            break
        a = np.flatnonzero(active)
        g = rows.gradient(idx[a], mid[a])
        iters[a] += 1
        up = g > 0
        lo[a[up]] = mid[a[up]]
        hi[a[~up]] = mid[a[~up]]
        flat = a[g == 0]
        lo[flat] = hi[flat] = mid[flat]
    return 0.5 * (lo + hi), iters


def _golden(rows: _Rows, r, lo, hi, tol):
    res = minimize_scalar(lambda a: -float(rows.objective(np.array([r]), np.array([a]))[0]),
                          bounds=(lo, hi), method="bounded", options={"xatol": tol})
    return float(res.x), int(res.nfev)


def maximize_rows(data: AreaLevelDataset, Y: np.ndarray, method: FitMethod, areas=None) -> dict:
    """Maximise ``log h + l_RE`` separately for each row of ``Y``.

    ``areas`` gives the area index that parameterises an area-specific
    adjustment for every row. Returns arrays ``A_hat``, ``status`` and
    diagnostic fields, one entry per row.
    """
    _check_method(data, method)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    R = Y.shape[0]
    if method.adjustment.area_specific:
        if areas is None:
            if method.adjustment.area is None:
                raise ValueError("area-specific adjustment needs an area index")
            areas = method.adjustment.area
        areas = np.broadcast_to(np.asarray(areas, dtype=int), (R,)).copy()
    else:
        areas = None
    rows = _Rows(data, Y, method, areas)
    amax = method.search_bound_factor * (np.var(Y, axis=1, ddof=1 if data.m > 1 else 0) + data.D.max())
    escalations = np.zeros(R, dtype=int)
    lo = np.empty(R); hi = np.empty(R)
    zero = np.zeros(R, dtype=bool); top = np.zeros(R, dtype=bool)
    todo = np.arange(R)
    for attempt in range(method.max_escalations + 1):
        l, h, z, t = _scan(rows, todo, amax[todo], method.allow_zero)
        lo[todo], hi[todo], zero[todo], top[todo] = l, h, z, t
        if attempt == method.max_escalations or not t.any():
            break
        todo = todo[t]
        amax[todo] *= 10.0
        escalations[todo] += 1

    status = np.full(R, "interior", dtype=object)
    A_hat = np.full(R, np.nan)
    iters = np.zeros(R, dtype=int)
    g_lo = rows.gradient(np.arange(R), lo)
    g_hi = rows.gradient(np.arange(R), hi)
    # zero boundary: REML-type objectives whose slope at 0 is not positive
    at_zero = zero & (g_lo <= 0)
    A_hat[at_zero] = 0.0
    status[at_zero] = "zero"
    at_top = top & (g_hi > 0)
    A_hat[at_top] = hi[at_top]
    status[at_top] = "upper_bound"
    regular = ~at_zero & ~at_top & (g_lo > 0) & (g_hi <= 0)
    idx = np.flatnonzero(regular)
    if idx.size:
        A_hat[idx], iters[idx] = _bisect(rows, idx, lo[idx], hi[idx])
    for r in np.flatnonzero(~at_zero & ~at_top & ~regular):
        tol = 1e-10 * (1.0 + amax[r])
        A_hat[r], iters[r] = _golden(rows, r, lo[r], hi[r], tol)
        if not method.allow_zero and A_hat[r] <= lo[r] + tol:
            status[r] = "lower_bound"
    if not np.all(np.isfinite(A_hat)):
        raise EstimationError("maximisation produced a non-finite estimate")
    t = reml_terms(data.X, data.D, Y, A_hat, order=2)
    with np.errstate(divide="ignore"):
        obj = t["l"] + log_adjustment(method.adjustment, data, A_hat, areas)
    grad = t["d1"] + log_adjustment_derivative(method.adjustment, data, A_hat, areas)
    return {"A_hat": A_hat, "status": status, "iterations": iters, "lo": lo, "hi": hi,
            "objective": obj, "gradient": grad, "curvature": t["d2"], "A_max": amax,
            "escalations": escalations, "beta": t["beta"]}


def _diagnostics(res: dict, r: int) -> MaximizerDiagnostics:
    return MaximizerDiagnostics(
        status=str(res["status"][r]), iterations=int(res["iterations"][r]),
        bracket=(float(res["lo"][r]), float(res["hi"][r])), objective=float(res["objective"][r]),
        gradient=float(res["gradient"][r]), curvature=float(res["curvature"][r]),
        A_max=float(res["A_max"][r]), escalations=int(res["escalations"][r]))


def maximize_adjusted_likelihood(data: AreaLevelDataset, method: FitMethod, area: int | None = None):
    """``argmax h(A) L_RE(A)`` over ``[0, A_max]`` (or ``(0, A_max]``).

    Returns ``(A_hat, MaximizerDiagnostics)``. ``A_max`` is
    ``search_bound_factor * (var(y) + max D)``, raised tenfold up to
    ``max_escalations`` times when the maximiser lands on it.
    """
    res = maximize_rows(data, data.y[None, :], method, None if area is None else [area])
    return float(res["A_hat"][0]), _diagnostics(res, 0)


@dataclass(frozen=True)
class AreaFit:
    """Per-area classical fit: one row per area in input order."""

    method: FitMethod
    area_ids: tuple[str, ...]
    A_hat: np.ndarray
    B_hat: np.ndarray
    theta_hat: np.ndarray
    beta_hat: np.ndarray
    regression: np.ndarray
    beta_mode: str
    diagnostics: tuple[MaximizerDiagnostics, ...]

    @property
    def m(self) -> int:
        return len(self.area_ids)

    def records(self) -> list[dict]:
        return [{"area_id": a, "A_hat": float(self.A_hat[i]), "B_hat": float(self.B_hat[i]),
                 "theta_hat": float(self.theta_hat[i]), "status": self.diagnostics[i].status}
                for i, a in enumerate(self.area_ids)]


def fit(data: AreaLevelDataset, method: FitMethod, beta_mode: str = "diagonal",
        n_jobs: int = 1) -> AreaFit:
    """Fit every area.

    Area-specific adjustments (power, multi-goal) give one ``A_hat`` per area;
    REML and ML share a single estimate. ``theta_hat[i]`` is the BLUP at
    ``A_hat[i]``. ``beta_hat`` is ``beta(A_hat)`` for a shared estimate and
    the GLS fit under ``diag(A_hat_i + D_i)`` otherwise; ``regression``
    holds the matching ``x_i' beta`` values (per ``beta_mode``).
    """
    _check_method(data, method)
    m = data.m
    if method.adjustment.area_specific:
        areas = np.arange(m)
        Y = np.broadcast_to(data.y, (m, m))
        chunks = [areas[k:k + 64] for k in range(0, m, 64)]

        def run(ch):
            return maximize_rows(data, Y[ch], method, ch)

        if n_jobs > 1:
            with ThreadPoolExecutor(n_jobs) as ex:
                parts = list(ex.map(run, chunks))
        else:
            parts = [run(ch) for ch in chunks]
        res = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
        A_hat = res["A_hat"]
        diags = tuple(_diagnostics(res, r) for r in range(m))
        theta = np.array([blup(data, A_hat[i], i) for i in range(m)])
        if np.all(A_hat > 0):
            regression = regression_fit(data, A_hat, beta_mode)
            beta_hat = gls_beta_heterogeneous(data, A_hat)
        else:
            # power adjustments may hit A = 0, where the diagonal plug-in is undefined
            beta_hat = gls_beta(data, float(np.median(A_hat)))[0]
            regression = data.X @ beta_hat
    else:
        res = maximize_rows(data, data.y[None, :], method)
        a = float(res["A_hat"][0])
        A_hat = np.full(m, a)
        d = _diagnostics(res, 0)
        diags = (d,) * m
        beta_hat = gls_beta(data, a)[0]
        theta = blup(data, a)
        regression = data.X @ beta_hat
    A_hat = np.asarray(A_hat, dtype=float)
    return AreaFit(method=method, area_ids=data.area_ids, A_hat=A_hat, B_hat=shrinkage(A_hat, data.D),
                   theta_hat=np.asarray(theta, dtype=float), beta_hat=beta_hat,
                   regression=np.asarray(regression, dtype=float), beta_mode=beta_mode,
                   diagnostics=diags)


class Theorem1Gap(NamedTuple):
    observed: float
    predicted: float
    boundary: bool


def theorem1_gap(data: AreaLevelDataset, method: FitMethod, area: int) -> Theorem1Gap:
    """Observed ``A_G - A_RE`` against ``2 dlog h(A_RE) / tr[V^-2](A_RE)``.

    A zero REML estimate is flagged through ``boundary`` and both gaps are NaN.
    """
    a_re, _ = maximize_adjusted_likelihood(data, FitMethod.reml())
    if a_re <= 0:
        return Theorem1Gap(np.nan, np.nan, True)
    a_g, _ = maximize_adjusted_likelihood(data, method, area)
    pred = 2.0 * log_adjustment_derivative(method.adjustment, data, a_re, area) / trace_v_inv_pow(data, a_re, 2)
    return Theorem1Gap(a_g - a_re, float(pred), False)
