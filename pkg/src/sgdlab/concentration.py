"""Concentration of SGD iterates in a shrinking ball around a minimizer.

The smoothed indicator ``phi`` equals 1 inside radius ``R``, falls off
through two quadratic pieces and vanishes beyond ``(1 + delta) R``. The
radius contracts as ``R(t) = R0 exp(-lam (t - t0) / 2)``. The smoothed
mass of the law can only drop by an amount of order ``eps^2`` before the
time ``T_eps`` at which the ball has shrunk to ``a eps^alpha``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import jsonio, snapshot


@dataclass(frozen=True)
class CutoffSpec:
    center: np.ndarray
    R0: float
    delta: float
    lam: float
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, float)))
        if not (self.R0 > 0 and self.delta > 0 and self.lam > 0):
            raise ValueError("R0, delta and lam must be positive")

    def radius(self, t):
        return self.R0 * np.exp(-0.5 * self.lam * (np.asarray(t, float) - self.t0))


def cutoff(spec: CutoffSpec, t, r):
    """Cut-off ``phi(t, r)`` at the contracted radius ``R(t)``."""
    return cutoff_profile(r, spec.radius(t), spec.delta)


def cutoff_profile(r, R, delta):
    """Smoothed indicator of ``r <= R`` with transition width ``delta R``."""
    r = np.asarray(r, float)
    u = (r - R) / (delta * R)  # 0 at R, 1 at (1+delta)R
    inner = 1.0 - 2.0 * u ** 2
    outer = 2.0 * (1.0 - u) ** 2
    return np.where(u <= 0, 1.0, np.where(u <= 0.5, inner, np.where(u <= 1.0, outer, 0.0)))


def smoothed_mass(state, spec: CutoffSpec, t: float):
    """``E phi(t, |X_t - x0|)`` with its standard error.

    ``state`` is an ensemble snapshot ``(M, d)`` or a grid density; a grid
    gives zero standard error.
    """
    if hasattr(state, "points"):
        r = np.linalg.norm(state.points() - spec.center, axis=-1)
        return float(np.sum(state.masses() * cutoff(spec, t, r))), 0.0
    X = np.asarray(state, float)
    phi = cutoff(spec, t, np.linalg.norm(X - spec.center, axis=-1))
    se = float(phi.std(ddof=1) / np.sqrt(phi.size)) if phi.size > 1 else np.inf
    return float(phi.mean()), se


def second_moment(state, center=None):
    """``E |X - c|^2`` and its standard error (0 for a grid density)."""
    if hasattr(state, "second_moment"):
        return state.second_moment(center), 0.0
    X = np.asarray(state, float)
    if center is not None:
        X = X - np.asarray(center, float)
    r2 = np.sum(X * X, axis=-1)
    se = float(r2.std(ddof=1) / np.sqrt(r2.size)) if r2.size > 1 else np.inf
    return float(r2.mean()), se


def second_moment_bound(m0: float, lam: float, sigma: float, eps: float, t):
    """Upper bound ``(m0 - 2 eps^2 sigma / lam) e^{-lam t} + 2 eps^2 sigma / lam``.

    Valid for minimizer at the origin, ``lam``-convex loss and ``tr Q <= sigma``.
    """
    c = 2.0 * eps * eps * sigma / lam
    return (m0 - c) * np.exp(-lam * np.asarray(t, float)) + c


def chebyshev_lower_bound(R: float, m2_bound):
    """In-ball mass bound ``max(0, 1 - m2_bound / R^2)``."""
    if not R > 0:
        raise ValueError("radius must be positive")
    return np.maximum(0.0, 1.0 - np.asarray(m2_bound, float) / R ** 2)


def concentration_constant(sigma: float, dim: int, delta: float) -> float:
    """Constant multiplying ``eps^2 / R^2`` in the smoothed-mass derivative bound."""
    return 4.0 * sigma * dim ** 2 / delta ** 2 * (1.0 + (1.0 + delta) / (1.0 + delta / 2.0))


def concentration_time(R0: float, lam: float, eps: float, a: float, alpha: float) -> float:
    """Time at which ``R0 e^{-lam t/2}`` reaches ``a eps^alpha``."""
    return 2.0 / lam * np.log(R0 / (a * eps ** alpha))


@dataclass
class ConcentrationReport:
    times: np.ndarray
    mass: np.ndarray
    se: np.ndarray
    radius: np.ndarray
    T_eps: float
    lam: float
    sigma: float
    eps: float
    beta: float
    budget: float
    margin: float
    passed: bool

    def to_csv(self, path):
        bound = np.full(self.times.shape, self.mass[0] - self.beta)
        snapshot.write_csv(path, ["time", "radius", "smoothed_mass", "se", "bound"],
                           np.column_stack([self.times, self.radius, self.mass, self.se, bound]))

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("times", "mass", "se", "radius"):
            d.pop(k)
        d["initial_mass"] = float(self.mass[0])
        d["min_mass"] = float(self.mass.min())
        return d

    def to_json(self, path):
        jsonio.dump(self.summary(), path)


def concentration_report(run, spec: CutoffSpec, a: float, alpha: float, beta: float,
                         eps: float, sigma: float) -> ConcentrationReport:
    """Check that the smoothed mass stays within ``beta`` of its initial value.

    Parameters
    ----------
    run : EnsembleTrace or sequence of GridDensity
        Must cover ``[t0, t0 + T_eps]``; snapshots after the window are ignored.
    spec : CutoffSpec
        ``lam`` should be a convexity constant valid on the ball of radius
        ``(1 + delta) R0`` (for instance a probed estimate with a haircut).
    beta : float
        Allowed drop. The check passes when
        ``min_t (mass(t) - mass(t0) + beta) - 2 SE >= 0``.
    sigma : float
        Bound on the noise covariance, used for the error budget.

    Notes
    -----
    ``budget`` is the integrated derivative bound
    ``eps^2 C / (R0^2 lam) (e^{lam T} - 1)`` over ``[t0, t0 + T_eps]``. It
    is sufficient, not sharp.
    """
    T = concentration_time(spec.R0, spec.lam, eps, a, alpha)
    if T <= 0:
        raise ValueError("the ball is already smaller than a eps^alpha")
    if hasattr(run, "positions"):
        times, laws = np.asarray(run.times, float), list(run.positions)
    else:
        laws = list(run)
        times = np.array([g.t for g in laws], float)
    if times.size == 0 or abs(times[0] - spec.t0) > 1e-9 or times[-1] < spec.t0 + T - 1e-9:
        raise ValueError(f"run does not cover the window [{spec.t0}, {spec.t0 + T}]")
    keep = times <= spec.t0 + T + 1e-12
    vals = [smoothed_mass(law, spec, t) for t, law, k in zip(times, laws, keep) if k]
    mass = np.array([v[0] for v in vals])
    se = np.array([v[1] for v in vals])
    tt = times[keep]
    drops = mass - mass[0] + beta - 2.0 * np.sqrt(se ** 2 + se[0] ** 2)
    margin = float(drops.min())
    C = concentration_constant(sigma, spec.center.size, spec.delta)
    budget = eps * eps * C / (spec.R0 ** 2 * spec.lam) * np.expm1(spec.lam * T)
    return ConcentrationReport(tt, mass, se, spec.radius(tt), float(T), spec.lam, sigma, eps,
                               beta, float(budget), margin, margin >= 0)
