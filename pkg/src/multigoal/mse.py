"""Second-order MSE of the EBLUP: Taylor components and the parametric bootstrap."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import AreaLevelDataset, DomainError, _check_A, gls_beta, shrinkage, trace_v_inv_pow
from .estimators import AreaFit, FitMethod, maximize_rows
from .likelihood import reml_terms

BOOTSTRAP_CHUNK = 2000
MAX_FAILURE_RATE = 0.01


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class MseComponents:
    g1: float | np.ndarray
    g2: float | np.ndarray
    g3: float | np.ndarray

    @property
    def taylor_total(self):
        return self.g1 + self.g2 + self.g3


def g_components(data: AreaLevelDataset, A: float, i: int | None = None) -> MseComponents:
    """Prasad-Rao type components at variance ``A``.

    g1 = A D_i/(A + D_i), g2 = B_i^2 x_i'(X'V^-1X)^-1 x_i and
    g3 = 2 D_i^2 / [(A + D_i)^3 tr(V^-2)]. Vectors over areas when ``i`` is None.
    """
    A = float(_check_A(A, strict=True))
    _, cov = gls_beta(data, A)
    D = data.D
    B = D / (A + D)
    g1 = A * B
    g2 = B**2 * np.einsum("ip,pq,iq->i", data.X, cov, data.X)
    g3 = 2.0 * D**2 / ((A + D) ** 3 * trace_v_inv_pow(data, A, 2))
    if i is None:
        return MseComponents(g1, g2, g3)
    return MseComponents(float(g1[i]), float(g2[i]), float(g3[i]))


def var_b_hat(data: AreaLevelDataset, A: float, i: int | None = None):
    """Asymptotic variance of the estimated shrinkage, ``2 D_i^2 / [tr(V^-2) (A + D_i)^4]``.

    This is ``b_1^2 * 2 / tr(V^-2)`` with ``b_1 = -D_i/(A + D_i)^2``.
    """
    A = float(_check_A(A, strict=True))
    D = data.D if i is None else data.D[i]
    b1 = -D / (A + D) ** 2
    v = b1**2 * 2.0 / trace_v_inv_pow(data, A, 2)
    return v if i is None else float(v)


def taylor_mse(data: AreaLevelDataset, fit: AreaFit, i: int | None = None):
    """``g1 + g2 + g3`` evaluated at each area's own estimate, no bias correction."""
    if i is not None:
        return g_components(data, fit.A_hat[i], i).taylor_total
    return np.array([g_components(data, fit.A_hat[k], k).taylor_total for k in range(data.m)])


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 10_000
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("bootstrap needs at least one replicate")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class BootstrapResult:
    area_ids: tuple[str, ...]
    estimate: np.ndarray
    mc_stderr: np.ndarray | None
    replicates: int
    failed: np.ndarray
    generating: str
    oracle: bool


def replicate_normals(seed: int, replicates: range, m: int, antithetic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal draws ``(u, e)`` for each replicate, each ``len(replicates) x m``.

    Replicate ``r`` uses a PCG64 stream keyed by ``(seed, r)`` (numpy's
    ziggurat normal sampler), so any subset can be regenerated on its own.
    Antithetic pairs reuse the stream of ``r // 2`` with flipped signs.
    """
    U = np.empty((len(replicates), m))
    E = np.empty((len(replicates), m))
    for k, r in enumerate(replicates):
        key, sign = (r // 2, -1.0 if r % 2 else 1.0) if antithetic else (r, 1.0)
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))
        U[k] = sign * g.standard_normal(m)
        E[k] = sign * g.standard_normal(m)
    return U, E


def _errors_for_area(data, method, i, A_gen, mean, U, E, oracle):
    """Squared prediction errors of area ``i`` across a chunk of replicates."""
    theta = mean + np.sqrt(A_gen) * U
    Ystar = theta + np.sqrt(data.D) * E
    if oracle:
        B = data.D[i] / (A_gen[i] + data.D[i])
        pred = (1.0 - B) * Ystar[:, i] + B * mean[i]
        return (pred - theta[:, i]) ** 2, np.zeros(len(U), dtype=bool)
    res = maximize_rows(data, Ystar, method, np.full(len(U), i))
    A_star = res["A_hat"]
    failed = ~np.isfinite(A_star) | (res["status"] == "upper_bound")
    A_ok = np.where(failed, 1.0, A_star)
    beta = reml_terms(data.X, data.D, Ystar, A_ok)["beta"]
    B = data.D[i] / (A_ok + data.D[i])
    pred = (1.0 - B) * Ystar[:, i] + B * (beta @ data.X[i])
    return (pred - theta[:, i]) ** 2, failed


def bootstrap_mse(data: AreaLevelDataset, fit: AreaFit, cfg: BootstrapConfig,
                  method: FitMethod | None = None, generating: str = "per_area",
                  oracle: bool = False, areas=None, n_jobs: int = 1) -> BootstrapResult:
    """Single parametric bootstrap MSE of the EBLUP for each area.

    Replicates draw ``theta* = x'beta_hat + u*`` and ``y* = theta* + e*``
    with ``beta_hat`` the GLS fit under ``diag(A_hat_j + D_j)``, refit the
    adjusted estimator of area ``i`` on ``y*`` and average
    ``(theta_hat_i(A*, y*) - theta*_i)^2``.

    ``generating="per_area"`` draws ``u*_j ~ N(0, A_hat_i)`` for every j when
    targeting area i (the two-level model with A replaced by area i's
    estimate); ``"heterogeneous"`` uses ``u*_j ~ N(0, A_hat_j)``. The same
    normal draws serve every area. ``oracle=True`` predicts with the
    generating ``(beta, A)`` instead of refitting, whose MSE is exactly g1.
    """
    if generating not in ("per_area", "heterogeneous"):
        raise ValueError(f"unknown generating model {generating!r}")
    method = fit.method if method is None else method
    A_fit = np.asarray(fit.A_hat, dtype=float)
    if np.any(A_fit <= 0):
        raise DomainError("bootstrap needs strictly positive variance estimates")
    mean = fit.regression
    areas = range(data.m) if areas is None else list(areas)
    R = cfg.replicates
    chunks = [range(s, min(s + BOOTSTRAP_CHUNK, R)) for s in range(0, R, BOOTSTRAP_CHUNK)]

    def run_chunk(ch):
        U, E = replicate_normals(cfg.seed, ch, data.m, cfg.antithetic)
        sq = np.empty((len(areas), len(ch)))
        bad = np.empty((len(areas), len(ch)), dtype=bool)
        for k, i in enumerate(areas):
            A_gen = np.full(data.m, A_fit[i]) if generating == "per_area" else A_fit
            sq[k], bad[k] = _errors_for_area(data, method, i, A_gen, mean, U, E, oracle)
        return sq, bad

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(run_chunk, chunks))
    else:
        parts = [run_chunk(ch) for ch in chunks]
    sq = np.concatenate([p[0] for p in parts], axis=1)
    bad = np.concatenate([p[1] for p in parts], axis=1)
    n_bad = bad.sum(axis=1)
    if np.any(n_bad > MAX_FAILURE_RATE * R):
        worst = int(np.argmax(n_bad))
        raise BootstrapError(f"{n_bad[worst]} of {R} refits failed for area "
                             f"{data.area_ids[list(areas)[worst]]}")
    est = np.empty(len(areas))
    se = np.empty(len(areas))
    for k in range(len(areas)):
        v = sq[k][~bad[k]]
        est[k] = np.sum(v) / v.size
        se[k] = np.std(v, ddof=1) / np.sqrt(v.size) if v.size > 1 else np.nan
    return BootstrapResult(area_ids=tuple(data.area_ids[i] for i in areas), estimate=est,
                           mc_stderr=None if R == 1 else se, replicates=R, failed=n_bad,
                           generating=generating, oracle=oracle)
