"""Mean exit times: analytic bounds, a 1D ODE solver and Kramers' law."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import solve_banded
from scipy.optimize import brentq, golden

from .domain import Ball, Box, probe_points
from .model import DiffusionField, LossModel


def met_lower_bound(R0: float, r: float, eps: float, sigma: float, dim: int) -> float:
    """``(R0^2 - r^2) / (2 eps^2 sigma d)`` for a start at distance ``r`` from the minimizer.

    Needs a convex loss minimized at the centre of the ball of radius
    ``R0`` and ``Q <= sigma I``.
    """
    if r > R0:
        raise ValueError("start lies outside the ball")
    return (R0 ** 2 - r ** 2) / (2.0 * eps * eps * sigma * dim)


def met_upper_bound(half_width: float, r: float, eps: float, beta: float, Lambda: float) -> float:
    """``(2/Lambda) (exp(Lambda w^2 / (2 beta eps^2)) - exp(Lambda r^2 / (2 beta eps^2)))``.

    ``w`` bounds ``|v . x|`` on the domain and ``r = |v . x0|``. For
    ``Lambda -> 0`` the limit ``(w^2 - r^2) / (beta eps^2)`` is returned.
    """
    c = 1.0 / (2.0 * beta * eps * eps)
    if Lambda == 0:
        return (half_width ** 2 - r ** 2) * 2.0 * c
    return 2.0 / Lambda * (np.exp(Lambda * c * half_width ** 2) - np.exp(Lambda * c * r ** 2))


@dataclass
class AssumptionProbe:
    """Outcome of the probe check for the upper bound's two hypotheses."""

    min_vQv: float
    max_drift_excess: float
    worst_q_point: np.ndarray
    worst_drift_point: np.ndarray
    n_probes: int
    beta: float

    @property
    def noise_ok(self) -> bool:
        return self.min_vQv >= self.beta * (1 - 1e-12)

    @property
    def drift_ok(self) -> bool:
        return self.max_drift_excess <= 0

    @property
    def holds(self) -> bool:
        return self.noise_ok and self.drift_ok

    @property
    def witness(self):
        """A violating probe point, or ``None`` if both checks pass."""
        if not self.noise_ok:
            return self.worst_q_point
        if not self.drift_ok:
            return self.worst_drift_point
        return None


def assumption_probe(model: LossModel, field_: DiffusionField, eps: float, domain, v,
                     beta: float, Lambda: float, origin=None, n_probes: int = 512) -> AssumptionProbe:
    """Check ``v^T Q v >= beta`` and ``(v.grad L)(v.x) <= Lambda (v.x)^2 + eps^2 beta / 2``.

    ``x`` is measured from ``origin`` (default 0). ``Q`` is the effective
    diffusion, including injected noise. The checks run on a deterministic
    probe set, so a pass is evidence rather than proof.
    """
    v = np.asarray(v, float)
    v = v / np.linalg.norm(v)
    o = np.zeros(model.dim) if origin is None else np.asarray(origin, float)
    P = probe_points(domain, n_probes)
    Q = field_.effective(P)
    vQv = np.einsum("i,nij,j->n", v, Q, v)
    s = (P - o) @ v
    excess = (model.gradient(P) @ v) * s - Lambda * s * s - 0.5 * eps * eps * beta
    iq, idr = int(np.argmin(vQv)), int(np.argmax(excess))
    return AssumptionProbe(float(vQv[iq]), float(excess[idr]), P[iq], P[idr], len(P), beta)


@dataclass
class MetBounds:
    """Lower and upper mean-exit-time bounds with the constants that produced them.

    ``upper`` is ``None`` when the assumption probe failed (see ``probe.witness``).
    """

    lower: float | None
    upper: float | None
    upper_certified: bool
    v: np.ndarray
    constants: dict
    probe: AssumptionProbe | None = None


def met_bounds(model: LossModel, field_: DiffusionField, eps: float, domain, x0, minimizer,
               sigma: float, v, beta: float, Lambda: float, n_probes: int = 512) -> MetBounds:
    """Both mean-exit-time bounds for a ball or box with assumption probes.

    The lower bound is reported for a ball centred at ``minimizer``; the
    upper bound is reported only if the probes pass (otherwise ``None``).
    """
    x0 = np.asarray(x0, float)
    xm = np.asarray(minimizer, float)
    lower = None
    if isinstance(domain, Ball) and np.allclose(domain.center, xm):
        lower = met_lower_bound(domain.radius, float(np.linalg.norm(x0 - xm)), eps, sigma, model.dim)
    vv = np.asarray(v, float) / np.linalg.norm(v)
    probe = assumption_probe(model, field_, eps, domain, vv, beta, Lambda, origin=xm,
                             n_probes=n_probes)
    if isinstance(domain, Ball):
        w = abs(float((domain.center - xm) @ vv)) + domain.radius
    else:
        corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(domain.lo, domain.hi)],
                                       indexing="ij")).reshape(model.dim, -1).T
        w = float(np.max(np.abs((corners - xm) @ vv)))
    upper = None
    r_v = abs(float((x0 - xm) @ vv))
    if probe.holds:
        upper = met_upper_bound(w, r_v, eps, beta, Lambda)
    consts = dict(sigma=sigma, beta=beta, Lambda=Lambda, Rv=w, r_v=r_v, eps=eps, d=model.dim,
                  r=float(np.linalg.norm(x0 - xm)),
                  R0=float(domain.radius) if isinstance(domain, Ball) else None)
    return MetBounds(lower, upper, probe.holds, vv, consts, probe)


def solve_met_1d(model: LossModel, q, eps: float, interval, n_cells: int = 1000):
    """Finite-difference mean exit time on ``(xl, xr)``.

    Solves ``-eps^2 q(x) u'' + L'(x) u' = 1`` with ``u(xl) = u(xr) = 0`` on
    ``n_cells`` uniform cells. The first-order term is upwinded by
    exponential fitting (Il'in-Allen-Southwell): the diffusion is scaled by
    ``(P/2) coth(P/2)`` with cell Peclet number ``P = L' h / (eps^2 q)``,
    which reduces to central differences when ``L' = 0``.

    Parameters
    ----------
    q : float or callable
        Scalar diffusion, bounded below by a positive constant.

    Returns
    -------
    x, u : ndarray
        Nodes including both end points, and the solution there.
    """
    xl, xr = map(float, interval)
    x = np.linspace(xl, xr, n_cells + 1)
    h = x[1] - x[0]
    xi = x[1:-1]
    qx = np.broadcast_to(np.asarray(q(xi) if callable(q) else q, float), xi.shape)
    if np.any(qx <= 0):
        raise ValueError("diffusion must be bounded away from zero")
    if eps <= 0:
        raise ValueError("eps must be positive for the elliptic problem")
    b = model.gradient(xi[:, None])[:, 0]
    w = eps * eps * qx
    P = b * h / w
    with np.errstate(invalid="ignore", over="ignore"):
        fit = np.where(np.abs(P) > 1e-8, 0.5 * P / np.tanh(0.5 * P), 1.0)
    fit = np.where(np.isfinite(fit), fit, 0.5 * np.abs(P))
    dif = w * fit / h ** 2
    lower = -dif - b / (2 * h)
    diag = 2 * dif
    upper = -dif + b / (2 * h)
    ab = np.zeros((3, xi.size))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    try:
        ui = solve_banded((1, 1), ab, np.ones(xi.size))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("mean exit time linear solve failed") from exc
    return x, np.concatenate([[0.0], ui, [0.0]])


def met_1d_quadrature(model: LossModel, eps: float, a: float, b: float, q=1.0, n: int = 20001,
                      left: str = "absorbing"):
    """Mean exit time ``u`` on ``[a, b]`` solving ``-eps^2 q u'' + L' u' = 1`` by quadrature.

    Independent of :func:`solve_met_1d`. Uses the integrating factor ``phi = exp(-int L' / (eps^2 q))`` and
    cumulative trapezoid quadrature, so it stays accurate for small
    ``eps``. ``u(b) = 0``; the left end is absorbing (``u(a) = 0``) or
    reflecting (``u'(a) = 0``). ``q`` is a constant or a callable of ``x``.

    Returns
    -------
    x, u : ndarray
    """
    x = np.linspace(a, b, n)
    X = x[:, None]
    qx = q(x) if callable(q) else np.full_like(x, float(q))
    qx = np.broadcast_to(np.asarray(qx, float), x.shape)
    if np.any(qx <= 0):
        raise ValueError("diffusion must be positive on the interval")
    w = eps * eps * qx
    drift = model.gradient(X)[:, 0]
    # log-space throughout: s = log(1/phi) can span hundreds of units
    s = cumulative_trapezoid(drift / w, x, initial=0.0)
    logG = _log_cumtrapz(-s - np.log(w), x)
    if left == "reflecting":
        du = -np.exp(logG + s)
    elif left == "absorbing":
        logc = _log_trapz(logG + s, x) - _log_trapz(s, x)
        du = np.exp(logc + s) - np.exp(logG + s)
    else:
        raise ValueError("left must be 'absorbing' or 'reflecting'")
    u = cumulative_trapezoid(du, x, initial=0.0)
    u -= u[-1]
    return x, u


def _log_cumtrapz(logf, x):
    """``log`` of the cumulative trapezoid integral of ``exp(logf)``."""
    terms = np.logaddexp(logf[:-1], logf[1:]) + np.log(0.5 * np.diff(x))
    return np.concatenate([[-np.inf], np.logaddexp.accumulate(terms)])


def _log_trapz(logf, x):
    return float(_log_cumtrapz(logf, x)[-1])


def kramers_estimate(model: LossModel, x1, z, eps: float, mode: str = "auto") -> float:
    """Kramers' mean transition time from the minimum ``x1`` over the saddle ``z``.

    Assumes isotropic noise ``sqrt(2 eps^2) dW``. In one dimension this
    is ``2 pi / sqrt(L''(x1) |L''(z)|) exp(dL / eps^2)``; ``mode`` may be
    ``"1d"``, ``"multi-d"`` or ``"auto"`` (chosen from the dimension).
    """
    if mode not in ("auto", "1d", "multi-d"):
        raise ValueError("mode must be 'auto', '1d' or 'multi-d'")
    if mode == "1d" and model.dim != 1:
        raise ValueError("1d mode needs a one-dimensional model")
    x1 = np.atleast_1d(np.asarray(x1, float))
    z = np.atleast_1d(np.asarray(z, float))
    H1 = model.hessian(x1)
    Hz = model.hessian(z)
    w1 = np.linalg.eigvalsh(0.5 * (H1 + H1.T))
    wz = np.linalg.eigvalsh(0.5 * (Hz + Hz.T))
    if w1.min() <= 0:
        raise ValueError(f"x1 is not a nondegenerate minimum (eigenvalues {w1})")
    if np.sum(wz < 0) != 1 or np.any(np.abs(wz) < 1e-12):
        raise ValueError(f"z is not a nondegenerate index-1 saddle (eigenvalues {wz})")
    dL = float(model.value(z) - model.value(x1))
    pref = 2 * np.pi / abs(wz[0]) * np.sqrt(abs(np.prod(wz)) / np.prod(w1))
    return float(pref * np.exp(dL / (eps * eps)))


def saddle_scan_1d(model: LossModel, x1, x2, n: int = 4001, return_flag: bool = False):
    """Highest point of ``L`` on the segment from ``x1`` to ``x2``.

    A uniform scan locates the maximum, which is then refined to 1e-10 by
    a root search on the directional slope (golden-section search on ``L``
    when the slope does not change sign). On a flat plateau the leftmost
    maximizer is kept and, with ``return_flag``, reported as degenerate.
    Off the line the result only bounds the true saddle height from above.
    """
    x1 = np.atleast_1d(np.asarray(x1, float))
    x2 = np.atleast_1d(np.asarray(x2, float))
    if np.allclose(x1, x2):
        raise ValueError("end points must be distinct")
    s = np.linspace(0.0, 1.0, n)
    vals = model.value(x1 + s[:, None] * (x2 - x1))
    k = int(np.argmax(vals))
    if k in (0, n - 1):
        raise ValueError("maximum sits at an end point: no saddle in between")
    top = np.flatnonzero(vals >= vals[k] - 1e-14 * max(1.0, abs(vals[k])))
    degenerate = bool(np.any(np.diff(top) == 1))
    if degenerate:
        t = s[top[0]]
    else:
        d = x2 - x1
        slope = lambda u: float(model.gradient(x1 + u * d) @ d)
        a, b = s[k - 1], s[k + 1]
        if slope(a) > 0 > slope(b):
            # golden section on L stalls near 1e-8 on a flat top; the slope root is sharper
            t = brentq(slope, a, b, xtol=1e-14)
        else:
            t = golden(lambda u: -float(model.value(x1 + u * d)), brack=(a, s[k], b), tol=1e-10)
    z = x1 + t * (x2 - x1)
    return (z, degenerate) if return_flag else z


def barrier_height(model: LossModel, x1, z) -> float:
    return float(model.value(np.atleast_1d(z)) - model.value(np.atleast_1d(x1)))


def barrier_slope(eps2, mean_times):
    """Slope of ``log T`` against ``1 / eps^2``; estimates the barrier without the prefactor."""
    eps2 = np.asarray(eps2, float)
    return float(np.polyfit(1.0 / eps2, np.log(np.asarray(mean_times, float)), 1)[0])


__all__ = [
    "AssumptionProbe", "MetBounds", "Ball", "Box", "assumption_probe", "barrier_height",
    "barrier_slope", "kramers_estimate", "met_1d_quadrature", "met_bounds", "met_lower_bound",
    "met_upper_bound", "saddle_scan_1d", "solve_met_1d",
]
