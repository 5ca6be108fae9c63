"""Pointwise formulas for the nested error regression model.

Unit-level model ``y_ij = x_ij'beta + v_i + e_ij`` with ``v_i ~ N(0, sigma_v2)``
and ``e_ij ~ N(0, sigma_e2)``. The shrinkage of area i is
``B_i = sigma_e2 / (n_i sigma_v2 + sigma_e2)``. Nothing here estimates
anything; the functions evaluate Fisher information, shrinkage derivatives
and the adjustment-gradient field at a given ``psi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError

DENOMINATOR_RTOL = 1e-12


class DegenerateDesignError(ValueError):
    pass


@dataclass(frozen=True)
class NermDesign:
    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n)
        if n.ndim != 1 or n.size == 0:
            raise ValueError("n must be a non-empty vector of unit counts")
        if not np.all(n == np.round(n)) or np.any(n < 1):
            raise ValueError("unit counts must be integers >= 1")
        n = n.astype(float)
        n.setflags(write=False)
        object.__setattr__(self, "n", n)

    @property
    def m(self) -> int:
        return self.n.size


@dataclass(frozen=True)
class Psi:
    sigma_v2: float
    sigma_e2: float

    def __post_init__(self):
        if not (self.sigma_v2 > 0 and self.sigma_e2 > 0):
            raise DomainError(f"variance components must be positive, got {self.sigma_v2!r}, {self.sigma_e2!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_v2, self.sigma_e2])


def _L(n, psi: Psi):
    return n * psi.sigma_v2 + psi.sigma_e2


def fisher_inverse(design: NermDesign, psi: Psi) -> np.ndarray:
    """Inverse Fisher information of ``psi`` in the closed form

        (2/a) [[ sum (n_i-1)/se^4 + L_i^-2 , -sum n_i/L_i^2 ],
               [ -sum n_i/L_i^2            ,  sum n_i^2/L_i^2 ]]

    with ``L_i = n_i sv + se`` and ``a`` the determinant of the bracketed
    matrix (so ``a = [sum n_i^2/L^2][sum (n_i-1)/se^4 + 1/L^2] - [sum n_i/L^2]^2``).
    """
    n = design.n
    L = _L(n, psi)
    s_nn = np.sum(n**2 / L**2)
    s_n = np.sum(n / L**2)
    s_e = np.sum((n - 1.0) / psi.sigma_e2**2 + 1.0 / L**2)
    a = s_nn * s_e - s_n**2
    if not a > 1e-14 * s_nn * s_e:
        raise DegenerateDesignError(
            "Fisher information is singular: sigma_e2 is not identified when every n_i = 1")
    return (2.0 / a) * np.array([[s_e, -s_n], [-s_n, s_nn]])


def shrinkage(psi: Psi, n_i: float) -> float:
    return psi.sigma_e2 / (n_i * psi.sigma_v2 + psi.sigma_e2)


def shrinkage_gradient(psi: Psi, n_i: float) -> np.ndarray:
    """``dB_i/dpsi = n_i / L_i^2 * (-sigma_e2, sigma_v2)``."""
    L = _L(n_i, psi)
    return n_i / L**2 * np.array([-psi.sigma_e2, psi.sigma_v2])


def shrinkage_hessian(psi: Psi, n_i: float) -> np.ndarray:
    """Second derivatives of ``B_i`` in ``(sigma_v2, sigma_e2)``.

    Differentiating ``-n e / L^2`` and ``n v / L^2`` once more:
    d2/dv2 = 2 n^2 e / L^3, d2/dv de = n (e - n v) / L^3, d2/de2 = -2 n v / L^3.
    """
    v, e = psi.sigma_v2, psi.sigma_e2
    L = _L(n_i, psi)
    off = n_i * (e - n_i * v) / L**3
    return np.array([[2.0 * n_i**2 * e / L**3, off], [off, -2.0 * n_i * v / L**3]])


def curvature_h(design: NermDesign, psi: Psi, i: int) -> float:
    """``H(psi) = -tr[d2B_i/dpsi2 I_F^-1] / 2``."""
    return float(-0.5 * np.sum(shrinkage_hessian(psi, design.n[i]) * fisher_inverse(design, psi)))


def adjustment_gradient(design: NermDesign, psi: Psi, i: int, k) -> np.ndarray:
    """One solution ``dlog h/dpsi = H / (k' I^-1 dB) * k`` of ``g' I^-1 dB = H``.

    Any direction ``k`` not orthogonal to ``I^-1 dB`` gives a valid solution.
    """
    k = np.asarray(k, dtype=float)
    if k.shape != (2,) or not np.all(np.isfinite(k)):
        raise ValueError("k must be a finite 2-vector")
    Iinv = fisher_inverse(design, psi)
    u = Iinv @ shrinkage_gradient(psi, design.n[i])
    denom = float(k @ u)
    if abs(denom) <= DENOMINATOR_RTOL * np.linalg.norm(k) * np.linalg.norm(u):
        raise DegenerateDesignError(
            f"k is orthogonal to I_F^-1 dB/dpsi (denominator k'I^-1 dB = {denom:.3e})")
    return curvature_h(design, psi, i) / denom * k
