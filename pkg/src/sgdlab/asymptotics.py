"""Long-time diagnostics: entropy, Fisher information, rates, moment norms and W2.

Also the local linearization at a minimum (Gaussian or degenerate steady
state from the Lyapunov equation) and the basin mass partition of an
ensemble.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import snapshot
from .fokker_planck import FokkerPlanckSolver, GaussianState, GridDensity, lyapunov_solve, hormander_condition
from .model import DiffusionField, LossModel, matrix_sqrt_psd

RHO_FLOOR = 1e-300


class EntropyUndefinedError(ValueError):
    pass


def _support(rho: GridDensity, rho_inf: GridDensity, max_excluded: float):
    if rho.values.shape != rho_inf.values.shape:
        raise ValueError("densities live on different grids")
    ok = rho_inf.values > RHO_FLOOR
    excluded = float(rho.values[~ok].sum() * rho.cell_volume)
    if excluded > max_excluded:
        raise EntropyUndefinedError(f"mass {excluded:.2e} sits where the reference vanishes")
    return ok, excluded


def relative_entropy(rho: GridDensity, rho_inf: GridDensity, max_excluded: float = 1e-8) -> float:
    """``(1/2) sum (rho/rho_inf - 1)^2 rho_inf`` times the cell volume.

    Cells where ``rho_inf`` falls below 1e-300 are skipped; if they hold
    more than ``max_excluded`` of ``rho``'s mass the entropy is undefined.
    """
    ok, _ = _support(rho, rho_inf, max_excluded)
    f = rho.values[ok] / rho_inf.values[ok]
    return float(0.5 * np.sum((f - 1.0) ** 2 * rho_inf.values[ok]) * rho.cell_volume)


def fisher_information(rho: GridDensity, rho_inf: GridDensity, field_: DiffusionField,
                       eps: float | None = None, max_excluded: float = 1e-8) -> float:
    """``sum grad(f)^T Q grad(f) rho_inf`` with ``f = rho/rho_inf``, central differences.

    ``Q`` is the effective diffusion of ``field_`` at cell centres. ``eps``
    is accepted for symmetry with the entropy identity
    ``dE/dt = -eps^2 I`` and does not enter the value.
    """
    ok, _ = _support(rho, rho_inf, max_excluded)
    f = np.where(ok, rho.values / np.where(ok, rho_inf.values, 1.0), 1.0)
    grads = np.gradient(f, *rho.h) if rho.dim > 1 else [np.gradient(f, rho.h[0])]
    G = np.stack(grads, axis=-1)
    Q = field_.effective(rho.points())
    quad = np.einsum("...i,...ij,...j->...", G, Q, G)
    return float(np.sum(np.where(ok, quad * rho_inf.values, 0.0)) * rho.cell_volume)


@dataclass
class EntropyTrace:
    times: np.ndarray
    entropy: np.ndarray
    fisher: np.ndarray
    second_moment: np.ndarray
    rate: float = float("nan")
    window: tuple = ()
    residual: float = float("nan")
    flags: list = field(default_factory=list)

    def production_residual(self, eps: float, window=None):
        """Max over the window of ``|dE/dt + eps^2 I| / (eps^2 I)``.

        ``dE/dt`` is a centred difference of the recorded entropies and
        ``I`` is the average of the two neighbouring Fisher values.
        """
        t, E, I = self.times, self.entropy, self.fisher
        dE = (E[2:] - E[:-2]) / (t[2:] - t[:-2])
        Im = I[1:-1]
        mask = np.ones(dE.size, dtype=bool)
        if window is not None:
            mask = (t[1:-1] >= window[0]) & (t[1:-1] <= window[1])
        rel = np.abs(dE + eps * eps * Im) / (eps * eps * Im)
        return float(np.max(rel[mask]))

    def to_csv(self, path):
        snapshot.write_csv(path, ["t", "E", "I", "m2"],
                           np.column_stack([self.times, self.entropy, self.fisher, self.second_moment]))


def entropy_decay_rate(trace: EntropyTrace, window=None, rms_tol: float = 0.05) -> float:
    """Minus the least-squares slope of ``log E`` against ``t`` over a window.

    The default window starts halfway through the trace. The fitted rate,
    window and RMS residual are stored on ``trace``; flags record
    non-decay, non-monotone entropy and a poor log-linear fit.
    """
    t, E = trace.times, trace.entropy
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    m = (t >= window[0]) & (t <= window[1])
    trace.flags = []
    if m.sum() < 2:
        raise ValueError("fit window holds fewer than two samples")
    Ew = E[m]
    if np.any(Ew <= 0):
        raise ValueError("entropy must be positive on the fit window")
    if np.any(np.diff(Ew) > 1e-10):
        trace.flags.append("non-monotone")
    p = np.polyfit(t[m], np.log(Ew), 1)
    res = np.log(Ew) - np.polyval(p, t[m])
    rate = float(-p[0])
    if abs(rate) < 1e-12 or np.ptp(Ew) <= 1e-14 * Ew.max():
        rate = 0.0
        trace.flags.append("non-decaying")
    rms = float(np.sqrt(np.mean(res ** 2)))
    if rms > rms_tol:
        trace.flags.append("poor-fit")
    trace.rate, trace.window, trace.residual = rate, tuple(float(w) for w in window), rms
    return rate


def entropy_trace(solver: FokkerPlanckSolver, rho0: GridDensity, rho_inf: GridDensity,
                  field_: DiffusionField, t_end: float, record_every: float,
                  dt: float | None = None) -> EntropyTrace:
    """Run the grid solver and record entropy, Fisher information and second moment."""
    _, snaps = solver.evolve(rho0, t_end, dt=dt, record_every=record_every)
    t = np.array([g.t for g in snaps])
    E = np.array([relative_entropy(g, rho_inf) for g in snaps])
    I = np.array([fisher_information(g, rho_inf, field_) for g in snaps])
    m2 = np.array([g.second_moment() for g in snaps])
    return EntropyTrace(t, E, I, m2)


def moment_norm(state, k: float = 2.0) -> float:
    """Weighted total variation ``sum (1 + |x|^2)^{k/2} |mu|``.

    ``state`` is a (possibly signed) GridDensity, for instance from
    :func:`grid_difference`, or a pair ``(points, weights)`` for a
    weighted ensemble.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if isinstance(state, GridDensity):
        P, w = state.points(), state.values * state.cell_volume
    else:
        P, w = state
        P = np.asarray(P, float)
        if P.ndim == 1:
            P = P[:, None]
        w = np.asarray(w, float)
    return float(np.sum((1.0 + np.sum(P * P, axis=-1)) ** (k / 2) * np.abs(w)))


def grid_difference(a: GridDensity, b: GridDensity) -> GridDensity:
    """Signed density ``a - b`` on their common grid."""
    if a.values.shape != b.values.shape:
        raise ValueError("densities live on different grids")
    return GridDensity(a.axes, a.values - b.values, a.t)


def _as_atoms(A):
    if isinstance(A, GridDensity):
        if A.dim != 1:
            raise ValueError("1D transport needs a one-dimensional grid")
        return A.axes[0].copy(), A.values * A.cell_volume
    if isinstance(A, tuple):
        x, w = A
        return np.asarray(x, float).ravel(), np.asarray(w, float).ravel()
    x = np.asarray(A, float).ravel()
    return x, np.full(x.size, 1.0 / x.size)


def wasserstein2_1d(A, B, mass_tol: float = 1e-9) -> float:
    """Exact 1D quadratic transport distance between two discrete laws.

    Inputs are samples (equal weights), ``(points, weights)`` pairs or 1D
    grid densities (cell masses at centres). The quantile functions are
    merged on the union of their cumulative-weight breakpoints, so equal
    size samples reduce to matched order statistics.
    """
    if not isinstance(A, (tuple, GridDensity)) and not isinstance(B, (tuple, GridDensity)):
        a = np.sort(np.asarray(A, float).ravel())
        b = np.sort(np.asarray(B, float).ravel())
        if a.size == b.size:
            return float(np.sqrt(np.sum((a - b) ** 2) / a.size))
    xa, wa = _as_atoms(A)
    xb, wb = _as_atoms(B)
    if abs(wa.sum() - 1.0) > mass_tol or abs(wb.sum() - 1.0) > mass_tol:
        raise ValueError("both inputs must carry unit mass")
    if np.any(wa < 0) or np.any(wb < 0):
        raise ValueError("weights must be nonnegative")
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa, xb, wb = xa[ia], wa[ia] / wa.sum(), xb[ib], wb[ib] / wb.sum()
    if xa.size == xb.size and np.allclose(wa, wb, rtol=0, atol=1e-15):
        return float(np.sqrt(np.sum(wa * (xa - xb) ** 2)))
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    u = np.union1d(ca, cb)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - 0.5 * du
    qa = xa[np.minimum(np.searchsorted(ca, mid), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), xb.size - 1)]
    return float(np.sqrt(np.sum(du * (qa - qb) ** 2)))


def matching_w2(a, b) -> float:
    """Brute-force optimal matching of two equal-size samples (small sizes only)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    best = min(np.sum((a - b[list(p)]) ** 2) for p in permutations(range(b.size)))
    return float(np.sqrt(best / a.size))


def gaussian_w2(A: GaussianState, B: GaussianState) -> float:
    """Closed-form W2 between Gaussians (Bures metric on covariances)."""
    sB = matrix_sqrt_psd(B.cov)
    cross = matrix_sqrt_psd(sB @ A.cov @ sB, tol=1e-8)
    val = np.sum((A.mean - B.mean) ** 2) + np.trace(A.cov + B.cov - 2 * cross)
    return float(np.sqrt(max(val, 0.0)))


def product_w2_bound(dx: float, m_y: float) -> float:
    """``sqrt(dx^2 + m_y)``: W2 bound to ``g (x) delta_0`` via the product coupling."""
    if dx < 0 or m_y < 0:
        raise ValueError("inputs must be nonnegative")
    return float(np.sqrt(dx * dx + m_y))


def transport_w2_bound(t, lam: float, entropy0: float):
    """``sqrt(e^{-2 lam t} (2 / lam) E0)`` for contraction to a point mass."""
    return np.sqrt(np.exp(-2 * lam * np.asarray(t, float)) * 2.0 / lam * entropy0)


def fit_rate(t, values, window=None) -> float:
    """Minus the slope of ``log values`` against ``t`` on an optional window."""
    t = np.asarray(t, float)
    v = np.asarray(values, float)
    m = np.ones(t.size, dtype=bool) if window is None else (t >= window[0]) & (t <= window[1])
    return float(-np.polyfit(t[m], np.log(v[m]), 1)[0])


@dataclass
class LinearizedMinimum:
    """Local steady state at a minimum from the linearized equation."""

    x: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    hormander: bool
    steady_state: GaussianState | None
    kind: str  # "gaussian", "degenerate-product", "point-mass" or "non-product"
    reachable: np.ndarray = None


def _reachable_basis(Q0, C, tol):
    d = C.shape[0]
    blocks = [Q0]
    for _ in range(d - 1):
        blocks.append(C @ blocks[-1])
    K = np.hstack(blocks)
    U, s, _ = np.linalg.svd(K)
    r = int(np.sum(s > tol * max(s.max(initial=0.0), 1e-300)))
    return U[:, :r], U[:, r:]


def linearize_at_minimum(model: LossModel, field_: DiffusionField, x_i, eps: float,
                         grad_tol: float = 1e-6, tol: float = 1e-8) -> LinearizedMinimum:
    """Gaussian (or degenerate) steady state of the equation linearized at ``x_i``.

    With ``Q = Q(x_i)`` (effective, including injected noise) and
    ``C = D^2 L(x_i)``, solves ``2 Q = C K + K C^T`` and scales ``K`` by
    ``eps^2``. If the Hormander-type condition fails but the reachable
    subspace of ``(C, Q)`` and its complement are both invariant under
    ``C``, the state is a Gaussian on the reachable part times a point
    mass on the rest.
    """
    x = np.asarray(x_i, float)
    g = model.gradient(x)
    C = np.array(model.hessian(x), float)
    if np.linalg.norm(g) > grad_tol:
        raise ValueError("x_i is not a critical point")
    w = np.linalg.eigvalsh(0.5 * (C + C.T))
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise ValueError("Hessian at x_i is not positive semidefinite")
    Q = np.array(field_.effective(x), float)
    d = model.dim
    ok, _ = hormander_condition(Q, C, tol) if np.any(Q) else (False, 0.0)
    if ok:
        sol = lyapunov_solve(Q, C)
        return LinearizedMinimum(x, Q, C, True, GaussianState(x, eps * eps * sol.K), "gaussian",
                                 np.eye(d))
    if not np.any(Q):
        return LinearizedMinimum(x, Q, C, False, GaussianState(x, np.zeros((d, d)), tuple(range(d))),
                                 "point-mass", np.zeros((d, 0)))
    R, N = _reachable_basis(Q, C, tol)
    invariant = (np.linalg.norm(N.T @ C @ R) <= tol * max(np.linalg.norm(C), 1.0)
                 and np.linalg.norm(R.T @ C @ N) <= tol * max(np.linalg.norm(C), 1.0))
    if not invariant:
        return LinearizedMinimum(x, Q, C, False, None, "non-product", R)
    Cr, Qr = R.T @ C @ R, R.T @ Q @ R
    Kr = lyapunov_solve(Qr, Cr).K
    cov = eps * eps * R @ Kr @ R.T
    axes = tuple(k for k in range(d) if np.allclose(R[k], 0.0, atol=tol))
    return LinearizedMinimum(x, Q, C, False, GaussianState(x, cov, axes), "degenerate-product", R)


@dataclass
class MassPartition:
    weights: np.ndarray  # per minimum, over the assigned particles
    se: np.ndarray
    unassigned: float
    reliable: bool
    labels: np.ndarray


def mass_partition(snapshot_, minima, model: LossModel, tol: float = 1e-6,
                   max_iter: int = 20000, assign_radius: float | None = None) -> MassPartition:
    """Assign every particle to the minimum reached by gradient descent from it.

    The step is ``1 / lam_max`` with ``lam_max`` the largest Hessian
    eigenvalue seen at the minima and the particles (capped below by 1).
    A particle is unassigned if descent does not reach ``|grad L| <= tol``
    or ends farther than ``assign_radius`` from every minimum. More than
    5% unassigned marks the partition unreliable.
    """
    X = np.array(snapshot_, float)
    if X.ndim == 1:
        X = X[:, None]
    centers = np.array([np.asarray(m.x if hasattr(m, "x") else m, float) for m in minima])
    if centers.ndim == 1:
        centers = centers[:, None]
    H = np.concatenate([model.hessian(centers), model.hessian(X)])
    lam_max = max(float(np.max(np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2))))), 1.0)
    step = 1.0 / lam_max
    done = np.zeros(len(X), dtype=bool)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        G = model.gradient(X[act])
        small = np.linalg.norm(G, axis=1) <= tol
        idx = np.flatnonzero(act)
        done[idx[small]] = True
        X[idx[~small]] -= step * G[~small]
    if assign_radius is None:
        sep = np.min([np.linalg.norm(a - b) for i, a in enumerate(centers)
                      for b in centers[i + 1:]], initial=1.0)
        assign_radius = 0.25 * sep
    dist = np.linalg.norm(X[:, None, :] - centers[None, :, :], axis=-1)
    labels = np.argmin(dist, axis=1)
    labels[~done | (dist[np.arange(len(X)), labels] > assign_radius)] = -1
    n = len(X)
    ok = labels >= 0
    counts = np.array([np.sum(labels == k) for k in range(len(centers))], float)
    weights = counts / max(ok.sum(), 1)
    se = np.sqrt(weights * (1 - weights) / max(ok.sum(), 1))
    unassigned = float(1.0 - ok.mean()) if n else 0.0
    return MassPartition(weights, se, unassigned, unassigned <= 0.05, labels)
