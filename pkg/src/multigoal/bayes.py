"""Posterior summaries of B_i and theta_i by one-dimensional quadrature.

With a flat prior on beta, integrating beta out leaves the residual
likelihood, so the marginal posterior of A is ``L_RE(A) pi(A)``. Integrals
are taken over ``t = log A`` on a window where the log integrand stays within
``truncation_nats`` of its maximum, with vector-valued adaptive Simpson.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import AreaLevelDataset, gls_beta, shrinkage, trace_v_inv_pow
from .estimators import FitMethod, maximize_adjusted_likelihood
from .likelihood import (AdjustmentSpec, PriorSpec, log_prior, log_prior_derivative,
                         log_residual_likelihood_derivative, reml_terms)

TRUNCATION_NATS = 40.0
MIN_PANELS = 128            # 4 * 128 + 1 = 513 nodes
MAX_NODES = 400_000
DEFAULT_RTOL = 1e-8


class ImproperPosteriorError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


def marginal_log_posterior(data: AreaLevelDataset, prior: PriorSpec, A, area: int | None = None):
    """``l_RE(A) + log pi(A)`` up to a constant (beta integrated out under its flat prior)."""
    t = reml_terms(data.X, data.D, data.y, np.asarray(A, dtype=float))["l"]
    v = t + log_prior(prior, data, A, area)
    return float(v) if np.ndim(v) == 0 else v


def _scale(data):
    return float(np.var(data.y, ddof=1) + data.D.max()) if data.m > 1 else float(data.D.max())


def tail_slopes(data: AreaLevelDataset, prior: PriorSpec, area=None) -> tuple[float, float]:
    """Slopes of the log integrand in ``t = log A`` far below and far above the data scale.

    The posterior is proper iff the lower slope is positive and the upper one
    negative; both settle to their limits well inside 12 decades.
    """
    s = _scale(data)
    out = []
    for A in (s * 1e-12, s * 1e12):
        d1 = log_residual_likelihood_derivative(data, A, 1)
        out.append(A * (d1 + log_prior_derivative(prior, data, A, area)) + 1.0)
    return out[0], out[1]


def posterior_mode(data: AreaLevelDataset, prior: PriorSpec, area=None) -> float:
    """Mode of the posterior density of ``log A``, via the adjusted-likelihood maximiser."""
    adj = AdjustmentSpec.custom(
        lambda d, A, a: log_prior(prior, d, A, a) + np.log(A),
        lambda d, A, a: log_prior_derivative(prior, d, A, a) + 1.0 / A,
        area=area, area_specific=prior.area_specific, zero_at_origin=True)
    a, _ = maximize_adjusted_likelihood(data, FitMethod(adj, boundary_policy="strictly_positive"), area)
    return a


def _crossing(f, t0, f0, nats, direction):
    """Offset from t0 where the vectorised log density ``f`` first drops ``nats`` below ``f0``.

    Offsets double from 2^-40 up to 2^9 to bracket the crossing, then the
    bracket is cut into 64 pieces four times (relative precision ~6e-8).
    """
    offs = np.concatenate([[0.0], 2.0 ** np.arange(-40, 10)])
    below = f(t0 + direction * offs) <= f0 - nats
    if not below.any():
        raise ImproperPosteriorError("log posterior does not decay within 512 units of log A")
    k = int(np.argmax(below))
    a, b = offs[k - 1], offs[k]
    for _ in range(4):
        grid = np.linspace(a, b, 65)
        below = f(t0 + direction * grid[1:-1]) <= f0 - nats
        j = int(np.argmax(below)) if below.any() else 63
        a, b = grid[j], grid[j + 1]
    return t0 + direction * b


class _Quadrature(NamedTuple):
    nodes: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    integral: np.ndarray
    error: np.ndarray
    node_count: int


def adaptive_simpson(func, a: float, b: float, rtol: float = DEFAULT_RTOL,
                     min_panels: int = MIN_PANELS, max_nodes: int = MAX_NODES) -> _Quadrature:
    """Vector-valued adaptive Simpson on [a, b].

    ``func(t)`` maps K points to a K x C array. Each panel carries five nodes;
    panels whose fine/coarse disagreement exceeds their share of
    ``rtol * sum |integral|`` (per column) are bisected until the summed
    error estimate meets the tolerance in every column.
    """
    t = np.linspace(a, b, 4 * min_panels + 1)
    v = np.asarray(func(t))
    idx = 4 * np.arange(min_panels)[:, None] + np.arange(5)[None, :]
    left, right = t[:-1:4].copy(), t[4::4].copy()
    vals = v[idx]                       # P x 5 x C
    count = t.size
    span = b - a
    while True:
        h = (right - left) / 4.0
        fine = (h / 3.0)[:, None] * (vals[:, 0] + 4 * vals[:, 1] + 2 * vals[:, 2] + 4 * vals[:, 3] + vals[:, 4])
        coarse = (2 * h / 3.0)[:, None] * (vals[:, 0] + 4 * vals[:, 2] + vals[:, 4])
        err = np.abs(fine - coarse) / 15.0
        scale = np.maximum(np.abs(fine).sum(axis=0), np.finfo(float).tiny)
        total_err = err.sum(axis=0)
        if np.all(total_err <= rtol * scale):
            break
        share = rtol * scale[None, :] * ((right - left) / span)[:, None]
        bad = np.any(err > share, axis=1)
        if not bad.any():
            bad = err.max(axis=1) >= np.quantile(err.max(axis=1), 0.9)
        nb = int(bad.sum())
        if count + 4 * nb > max_nodes:
            raise QuadratureError(
                f"quadrature did not converge: relative error {np.max(total_err / scale):.3e} "
                f"after {count} nodes (requested {rtol:.1e})")
        lb, rb, vb, hb = left[bad], right[bad], vals[bad], h[bad]
        new_t = np.stack([lb + hb / 2, lb + 3 * hb / 2, lb + 5 * hb / 2, lb + 7 * hb / 2], axis=1)
        nv = np.asarray(func(new_t.ravel())).reshape(nb, 4, -1)
        count += 4 * nb
        lvals = np.stack([vb[:, 0], nv[:, 0], vb[:, 1], nv[:, 1], vb[:, 2]], axis=1)
        rvals = np.stack([vb[:, 2], nv[:, 2], vb[:, 3], nv[:, 3], vb[:, 4]], axis=1)
        mid = lb + 2 * hb
        keep = ~bad
        left = np.concatenate([left[keep], lb, mid])
        right = np.concatenate([right[keep], mid, rb])
        vals = np.concatenate([vals[keep], lvals, rvals])
        order = np.argsort(left, kind="stable")
        left, right, vals = left[order], right[order], vals[order]
    h = (right - left) / 4.0
    nodes = left[:, None] + h[:, None] * np.arange(5)[None, :]
    weights = (h / 3.0)[:, None] * np.array([1.0, 4.0, 2.0, 4.0, 1.0])[None, :]
    return _Quadrature(nodes.ravel(), weights.ravel(), vals.reshape(-1, vals.shape[-1]),
                       fine.sum(axis=0), total_err, count)


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior moments for a set of areas under one prior.

    Arrays are indexed like ``area_ids``; ``errors`` holds the propagated
    quadrature error estimate of each summary.
    """

    prior: str
    area_ids: tuple[str, ...]
    e_b: np.ndarray
    v_b: np.ndarray
    e_theta: np.ndarray
    v_theta: np.ndarray
    errors: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    def records(self) -> list[dict]:
        return [{"area_id": a, "prior": self.prior, "e_b": float(self.e_b[k]), "v_b": float(self.v_b[k]),
                 "e_theta": float(self.e_theta[k]), "v_theta": float(self.v_theta[k])}
                for k, a in enumerate(self.area_ids)]


def _node_values(data, prior, A, areas, prior_area):
    t = reml_terms(data.X, data.D, data.y, A)
    with np.errstate(divide="ignore"):
        lp = t["l"] + log_prior(prior, data, A, prior_area) + np.log(A)
    X = data.X[areas]
    D = data.D[areas]
    B = D[None, :] / (A[:, None] + D[None, :])
    blup = (1.0 - B) * data.y[areas][None, :] + B * (t["beta"] @ X.T)
    g12 = A[:, None] * B + B**2 * np.einsum("ip,kpq,iq->ki", X, t["cov"], X)
    return lp, B, blup, g12


def _summarize_one(data, prior, areas, prior_area, rtol, nats):
    lo_slope, hi_slope = tail_slopes(data, prior, prior_area)
    if hi_slope > -1e-6 or lo_slope < 1e-6:
        raise ImproperPosteriorError(
            f"posterior under the {prior.describe()} prior is improper "
            f"(log-A tail slopes {lo_slope:.4g} at 0 and {hi_slope:.4g} at infinity)")
    mode = posterior_mode(data, prior, prior_area)
    t0 = np.log(mode)

    def logpost(t):
        A = np.exp(np.atleast_1d(t))
        return _node_values(data, prior, A, areas[:0], prior_area)[0]

    f0 = float(logpost(t0)[0])
    t_lo = _crossing(logpost, t0, f0, nats, -1.0)
    t_hi = _crossing(logpost, t0, f0, nats, +1.0)

    def func(t):
        lp, B, blup, g12 = _node_values(data, prior, np.exp(t), areas, prior_area)
        e = np.exp(lp - f0)[:, None]
        return np.concatenate([e, e * B, e * B**2, e * blup, e * blup**2, e * g12], axis=1)

    q = adaptive_simpson(func, t_lo, t_hi, rtol)
    n = len(areas)
    Z = q.integral[0]
    mom = q.integral[1:].reshape(5, n) / Z
    rel_err = q.error[1:].reshape(5, n) / Z + np.abs(mom) * q.error[0] / Z
    w = q.weights * q.values[:, 0] / np.sum(q.weights * q.values[:, 0])
    V = q.values[:, 1:].reshape(-1, 5, n) / q.values[:, :1, None]
    B, blup, g12 = V[:, 0], V[:, 2], V[:, 4]
    e_b = w @ B
    v_b = w @ (B - e_b) ** 2
    e_th = w @ blup
    v_th = w @ (g12 + (blup - e_th) ** 2)
    errors = {
        "e_b": rel_err[0], "v_b": rel_err[1] + 2 * np.abs(mom[0]) * rel_err[0],
        "e_theta": rel_err[2],
        "v_theta": rel_err[4] + rel_err[3] + 2 * np.abs(mom[2]) * rel_err[2],
    }
    diag = {"node_count": int(q.node_count), "truncation": [float(np.exp(t_lo)), float(np.exp(t_hi))],
            "mode": float(mode), "normalization_log": float(np.log(Z) + f0),
            "normalization_error": float(q.error[0] / Z), "divergence_flag": False,
            "tail_slopes": [float(lo_slope), float(hi_slope)]}
    return e_b, v_b, e_th, v_th, errors, diag


def posterior_summary(data: AreaLevelDataset, prior: PriorSpec, areas=None,
                      rtol: float = DEFAULT_RTOL, truncation_nats: float = TRUNCATION_NATS) -> PosteriorSummary:
    """E[B_i|y], V[B_i|y], E[theta_i|y] and V[theta_i|y] for the requested areas.

    ``theta_i`` given ``(A, y)`` is normal with mean BLUP_i(A) and variance
    ``g1 + g2``; the posterior variance adds the spread of the BLUP over A.
    Area-specific priors are integrated once per area.

    Raises:
        ImproperPosteriorError: the log integrand does not decay in a tail.
        QuadratureError: the tolerance was not met within ``MAX_NODES`` nodes.
    """
    if areas is None:
        areas = np.arange(data.m)
    areas = np.atleast_1d(np.asarray(areas, dtype=int))
    if prior.area_specific:
        parts = [_summarize_one(data, prior, areas[k:k + 1], int(i), rtol, truncation_nats)
                 for k, i in enumerate(areas)]
        cat = lambda j: np.concatenate([p[j] for p in parts])  # noqa: E731
        e_b, v_b, e_th, v_th = (cat(j) for j in range(4))
        errors = {k: np.concatenate([p[4][k] for p in parts]) for k in parts[0][4]}
        diags = [p[5] for p in parts]
    else:
        e_b, v_b, e_th, v_th, errors, d = _summarize_one(data, prior, areas, None, rtol, truncation_nats)
        diags = [d] * len(areas)
    return PosteriorSummary(prior=prior.describe(), area_ids=tuple(data.area_ids[i] for i in areas),
                            e_b=e_b, v_b=v_b, e_theta=e_th, v_theta=v_th, errors=errors, diagnostics=diags)


class DattaExpansion(NamedTuple):
    e_b: float
    theta: float
    g1pi: float
    boundary: bool


class ExpansionTerms(NamedTuple):
    """Shrinkage derivatives, scaled residual-likelihood curvatures and log-prior slope at one ``A``."""

    b1: float
    b2: float
    h2: float
    h3: float
    rho1: float


def expansion_terms(data: AreaLevelDataset, A: float, i: int, prior: PriorSpec | None = None) -> ExpansionTerms:
    """``b1 = -D_i/(A+D_i)^2``, ``b2 = 2D_i/(A+D_i)^3``, ``h2 = -l''/m``, ``h3 = -l'''/m``
    and ``rho1 = dlog pi/dA`` (NaN without a prior)."""
    m = data.m
    Di = data.D[i]
    rho1 = np.nan if prior is None else float(log_prior_derivative(prior, data, A, i))
    return ExpansionTerms(
        b1=float(-Di / (A + Di) ** 2), b2=float(2.0 * Di / (A + Di) ** 3),
        h2=float(-log_residual_likelihood_derivative(data, A, 2) / m),
        h3=float(-log_residual_likelihood_derivative(data, A, 3) / m), rho1=rho1)


def datta_expansion_check(data: AreaLevelDataset, prior: PriorSpec, i: int) -> DattaExpansion:
    """Second-order expansions of E[B_i|y] and E[theta_i|y] around the REML estimate.

    A zero REML estimate is flagged and yields NaNs.
    """
    a, _ = maximize_adjusted_likelihood(data, FitMethod.reml())
    if a <= 0:
        return DattaExpansion(np.nan, np.nan, np.nan, True)
    m = data.m
    b1, b2, h2, h3, rho1 = expansion_terms(data, a, i, prior)
    B = shrinkage(a, data.D[i])
    e_b = B + (b2 - h3 / h2 * b1) / (2 * m * h2) + b1 * rho1 / (m * h2)
    g1pi = B**2 / (m * h2) * (rho1 - 1.0 / (a + data.D[i]) - h3 / (2 * h2))
    resid = data.y[i] - data.X[i] @ gls_beta(data, a)[0]
    theta = data.y[i] - B * resid + g1pi / data.D[i] * resid
    return DattaExpansion(float(e_b), float(theta), float(g1pi), False)


def flat_prior_bias_term(data: AreaLevelDataset, A: float, i: int) -> float:
    """Leading O(1/m) gap between the flat-prior posterior mean of B_i and the multi-goal estimate.

    ``4 D_i / (tr[V^-2] (A + D_i)^2) * [1/(A + D_i) - tr[V^-3]/tr[V^-2]]``; zero
    for balanced data.
    """
    Di = data.D[i]
    t2 = trace_v_inv_pow(data, A, 2)
    t3 = trace_v_inv_pow(data, A, 3)
    return float(4 * Di / (t2 * (A + Di) ** 2) * (1.0 / (A + Di) - t3 / t2))
