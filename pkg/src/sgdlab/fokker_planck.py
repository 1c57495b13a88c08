"""Grid solver for the diffusion-approximation Fokker-Planck equation.

The equation is ``rho_t = div(eps^2 div(Q rho) + rho grad L)`` on a box with
zero-flux walls, for ``d`` in {1, 2} and diagonal ``Q``. Fluxes use
exponential fitting (Scharfetter-Gummel): on each face the drift is the
discrete slope of ``L + eps^2 Q`` and the weights are Bernoulli functions of
the local Peclet number. The scheme conserves mass to round-off, keeps the
density nonnegative under the CFL bound and reproduces the Gibbs density
``exp(-L / (eps^2 sigma))`` exactly when ``Q = sigma I``.

Closed forms for linear drift (Ornstein-Uhlenbeck), the Lyapunov
equation and a degenerate product case live here as well.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from . import snapshot
from .domain import Box
from .model import DiffusionField, LossModel


CLIP_BUDGET = 1e-10


class DomainTooSmallError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


class CFLError(ValueError):
    pass


class HorizonError(RuntimeError):
    pass


@dataclass
class GaussianState:
    """Gaussian with mean ``mean`` and covariance ``cov``.

    ``point_axes`` lists coordinate axes carried as point masses; their
    rows and columns of ``cov`` are exactly zero.
    """

    mean: np.ndarray
    cov: np.ndarray
    point_axes: tuple = ()

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, float))
        self.cov = np.atleast_2d(np.asarray(self.cov, float)).copy()
        for k in self.point_axes:
            self.cov[k, :] = 0.0
            self.cov[:, k] = 0.0

    @property
    def dim(self):
        return self.mean.size

    def pdf(self, X):
        X = np.asarray(X, float)
        P = np.linalg.inv(self.cov)
        r = X - self.mean
        q = np.einsum("...i,ij,...j->...", r, P, r)
        return np.exp(-0.5 * q) / np.sqrt(np.linalg.det(2 * np.pi * self.cov))

    def second_moment(self) -> float:
        return float(np.trace(self.cov) + self.mean @ self.mean)


@dataclass
class GridDensity:
    """Cell-centred density on a uniform tensor grid.

    ``values`` are densities (not cell masses); ``axes`` hold the cell
    centres along each coordinate.
    """

    axes: tuple
    values: np.ndarray
    t: float = 0.0

    @property
    def dim(self):
        return len(self.axes)

    @property
    def h(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def points(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def masses(self):
        return self.values * self.cell_volume

    def mean(self):
        return np.tensordot(self.masses(), self.points(), axes=self.dim)

    def covariance(self):
        P = (self.points() - self.mean()).reshape(-1, self.dim)
        w = self.masses().ravel()
        return np.einsum("n,ni,nj->ij", w, P, P)

    def second_moment(self, center=None) -> float:
        P = self.points()
        if center is not None:
            P = P - np.asarray(center, float)
        return float(np.sum(self.masses() * np.sum(P * P, axis=-1)))

    def marginal(self, axis: int):
        other = tuple(k for k in range(self.dim) if k != axis)
        w = self.values.sum(axis=other) * np.prod([self.h[k] for k in other]) if other else self.values
        return self.axes[axis], w

    def mass_outside_ball(self, center, radius) -> float:
        r2 = np.sum((self.points() - np.asarray(center, float)) ** 2, axis=-1)
        return float(self.masses()[r2 > radius ** 2].sum())

    def l1_distance(self, other) -> float:
        """L1 distance to another density: a GridDensity or a callable ``X -> rho``."""
        ref = other.values if isinstance(other, GridDensity) else other(self.points())
        return float(np.abs(self.values - ref).sum() * self.cell_volume)

    def boundary_mass(self) -> float:
        inner = np.ones(self.values.shape, dtype=bool)
        inner[(slice(1, -1),) * self.dim] = False
        return float(self.masses()[inner].sum())

    def copy(self):
        return GridDensity(self.axes, self.values.copy(), self.t)

    def to_csv(self, path):
        P = self.points().reshape(-1, self.dim)
        rows = np.column_stack([P, self.values.ravel()])
        snapshot.write_csv(path, [f"x_{i + 1}" for i in range(self.dim)] + ["density"], rows)

    def to_binary(self, path):
        snapshot.write_grid(path, self.axes, self.values, self.t)

    @classmethod
    def from_binary(cls, path):
        axes, values, t = snapshot.read_grid(path)
        return cls(tuple(axes), values, t)


def grid_axes(box: Box, cells):
    cells = np.broadcast_to(np.atleast_1d(cells), (box.dim,))
    return tuple(lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in zip(box.lo, box.hi, cells))


def init_grid(box: Box, cells, rho0, boundary_tol: float | None = 1e-8) -> GridDensity:
    """Sample an initial density at cell centres and normalize it to mass 1.

    Parameters
    ----------
    box : Box
    cells : int or sequence of int
    rho0 : GaussianState or callable
        Callables receive points of shape ``(n1, ..., d)``.
    boundary_tol : float or None
        Maximum mass allowed in the outermost cell layer; ``None`` skips it.
    """
    if box.dim not in (1, 2):
        raise ValueError("grid solver supports d = 1 or 2")
    axes = grid_axes(box, cells)
    h = np.array([a[1] - a[0] for a in axes])
    g = GridDensity(axes, np.zeros([len(a) for a in axes]))
    if isinstance(rho0, GaussianState):
        if np.any(np.sqrt(np.diag(rho0.cov)) < h):
            raise ResolutionError("initial Gaussian is narrower than one cell")
        vals = rho0.pdf(g.points())
    else:
        vals = np.asarray(rho0(g.points()), float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)) or vals.sum() <= 0:
        raise ValueError("initial density must be finite, nonnegative and nonzero")
    g.values = vals / (vals.sum() * g.cell_volume)
    if g.masses().max() > 0.5:
        raise ResolutionError("initial density is concentrated in a single cell")
    if boundary_tol is not None and g.boundary_mass() > boundary_tol:
        raise DomainTooSmallError(f"boundary cells carry mass {g.boundary_mass():.2e}")
    return g


def _bernoulli(z):
    """``z / (exp(z) - 1)`` with the removable singularity at 0."""
    z = np.asarray(z, float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-12
    with np.errstate(over="ignore"):
        out[nz] = z[nz] / np.expm1(z[nz])
    return out


class FokkerPlanckSolver:
    """Precomputed face coefficients for one (model, field, eps, grid) combination."""

    def __init__(self, model: LossModel, field_: DiffusionField, eps: float, axes):
        self.axes = tuple(axes)
        self.dim = len(self.axes)
        if model.dim != self.dim:
            raise ValueError("model dimension does not match the grid")
        self.eps2 = float(eps) ** 2
        self.h = [float(a[1] - a[0]) for a in self.axes]
        P = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)
        Lc = model.value(P)
        Qc = field_.diagonal(P)
        self.cp, self.cm = [], []
        amax, dmax = 0.0, 0.0
        for k in range(self.dim):
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[k], hi[k] = slice(0, -1), slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            h = self.h[k]
            Pf = 0.5 * (P[lo] + P[hi])
            D = self.eps2 * field_.diagonal(Pf)[..., k]
            a = (Lc[hi] - Lc[lo]) / h + self.eps2 * (Qc[hi][..., k] - Qc[lo][..., k]) / h
            pos = D > 0
            cp = np.where(a < 0, -a, 0.0)
            cm = np.where(a > 0, a, 0.0)
            Pe = np.where(pos, a * h / np.where(pos, D, 1.0), 0.0)
            cp = np.where(pos, D / h * _bernoulli(Pe), cp)
            cm = np.where(pos, D / h * _bernoulli(-Pe), cm)
            self.cp.append(cp)
            self.cm.append(cm)
            amax = max(amax, float(np.max(np.abs(a), initial=0.0)) / h)
            dmax = max(dmax, 2.0 * float(np.max(D, initial=0.0)) / h ** 2)
        self.max_rate = max(amax, dmax)
        self.clipped_mass = 0.0
        self.cell_volume = float(np.prod(self.h))
        # per-axis bound 0.4 min(h/|a|, h^2/(2D)), shared across axes
        self.cfl_limit = 0.4 / (self.dim * self.max_rate) if self.max_rate > 0 else np.inf

    def flux(self, rho):
        """Face fluxes ``J = c+ rho_i - c- rho_{i+1}`` along each axis."""
        out = []
        for k in range(self.dim):
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[k], hi[k] = slice(0, -1), slice(1, None)
            out.append(self.cp[k] * rho[tuple(lo)] - self.cm[k] * rho[tuple(hi)])
        return out

    def rhs(self, rho):
        dr = np.zeros_like(rho)
        for k, J in enumerate(self.flux(rho)):
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[k], hi[k] = slice(0, -1), slice(1, None)
            dr[tuple(lo)] -= J / self.h[k]
            dr[tuple(hi)] += J / self.h[k]
        return dr

    def step(self, grid: GridDensity, dt: float) -> GridDensity:
        if dt > self.cfl_limit * (1 + 1e-12):
            raise CFLError(f"time step {dt:.3e} exceeds the CFL bound {self.cfl_limit:.3e}")
        v = self._clip(grid.values + dt * self.rhs(grid.values))
        return GridDensity(grid.axes, v, grid.t + dt)

    def _clip(self, v):
        # only round-off can go negative below the CFL bound
        neg = v < 0
        if np.any(neg):
            lost = -float(v[neg].sum()) * self.cell_volume
            if lost > CLIP_BUDGET:
                raise CFLError(f"clipped mass {lost:.2e} exceeds the per-step budget")
            self.clipped_mass += lost
            v[neg] = 0.0
        return v

    def evolve(self, grid: GridDensity, t_end: float, dt: float | None = None,
               record_every: float | None = None, callback=None):
        """Advance to ``t_end`` with equal steps no larger than ``dt``.

        Returns the final grid, or ``(final, snapshots)`` when
        ``record_every`` is given. ``callback(grid)`` runs after each step.
        """
        dt_max = self.cfl_limit if dt is None else min(dt, self.cfl_limit)
        span = t_end - grid.t
        if span < 0:
            raise ValueError("t_end lies before the grid time")
        n = int(np.ceil(span / dt_max - 1e-9)) if span > 0 else 0
        step = span / n if n else 0.0
        every = None
        if record_every is not None:
            every = max(int(round(record_every / step)), 1) if n else 1
        g = grid
        snaps = [g.copy()] if every else None
        v = g.values.copy()
        for i in range(1, n + 1):
            v = self._clip(v + step * self.rhs(v))
            if callback is not None or (every and (i % every == 0 or i == n)):
                g = GridDensity(grid.axes, v.copy(), grid.t + i * step)
                if callback is not None:
                    callback(g)
                if every and (i % every == 0 or i == n):
                    snaps.append(g)
        g = GridDensity(grid.axes, v, grid.t + n * step)
        return (g, snaps) if every else g


def step_fp(grid: GridDensity, model: LossModel, field_: DiffusionField, eps: float,
            dt: float) -> GridDensity:
    """One explicit step; builds the face coefficients on every call."""
    return FokkerPlanckSolver(model, field_, eps, grid.axes).step(grid, dt)


# ----------------------------------------------------------------------------
# closed forms


def ou_closed_form(Q0, C, rho0: GaussianState, t: float, n_steps: int = 1000) -> GaussianState:
    """Law at time ``t`` of ``rho_t = div(Q0 grad rho + rho C x)`` from a Gaussian.

    This is the process ``dX = -C X dt + sqrt(2 Q0) dW``. The mean uses
    the matrix exponential; the covariance integrates
    ``S' = -C S - S C^T + 2 Q0`` with classical RK4 (``n_steps`` steps),
    projecting back to the PSD cone if round-off pushes an eigenvalue
    below -1e-12.
    """
    C = np.atleast_2d(np.asarray(C, float))
    Q0 = np.atleast_2d(np.asarray(Q0, float))
    S = rho0.cov.copy()
    m = expm(-C * t) @ rho0.mean
    if t > 0:
        h = t / n_steps

        def f(S):
            return -C @ S - S @ C.T + 2 * Q0

        for _ in range(n_steps):
            k1 = f(S)
            k2 = f(S + 0.5 * h * k1)
            k3 = f(S + 0.5 * h * k2)
            k4 = f(S + h * k3)
            S = S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            S = 0.5 * (S + S.T)
            w, V = np.linalg.eigh(S)
            if w.min() < -1e-12:
                S = (V * np.maximum(w, 0.0)) @ V.T
    return GaussianState(m, S)


@dataclass
class ProductDatum:
    """Initial law: Gaussian x-block times a y-block with given mean and covariance."""

    x: GaussianState
    y_mean: np.ndarray
    y_cov: np.ndarray


@dataclass
class DegenerateProduct:
    """Gaussian x-block times a y-block transported by ``dy/dt = -C3 y``."""

    x: GaussianState
    y_mean: np.ndarray
    y_cov: np.ndarray
    y_map: np.ndarray
    jacobian: float

    def y_second_moment(self) -> float:
        return float(np.trace(self.y_cov) + self.y_mean @ self.y_mean)

    def second_moment(self) -> float:
        return self.x.second_moment() + self.y_second_moment()


def degenerate_product_solution(x_block: dict, y_block: dict, rho0: ProductDatum,
                                t: float) -> DegenerateProduct:
    """Exact solution when diffusion acts only on the x-block and drift is block diagonal.

    ``x_block`` holds ``Q0`` and ``C0``; ``y_block`` holds ``C3``. Optional
    coupling blocks ``C1`` (in ``x_block``) and ``C2`` (in ``y_block``) must
    vanish. The y-law is pushed forward by ``exp(-C3 t)``, so its density
    picks up the factor ``exp(tr(C3) t)``.
    """
    for blk, key in ((x_block, "C1"), (y_block, "C2")):
        B = blk.get(key)
        if B is not None and np.any(np.asarray(B) != 0):
            raise ValueError("coupling blocks must vanish for the product solution")
    C3 = np.atleast_2d(np.asarray(y_block["C3"], float))
    ym = np.atleast_1d(np.asarray(rho0.y_mean, float))
    yc = np.atleast_2d(np.asarray(rho0.y_cov, float))
    E = expm(-C3 * t)
    xs = ou_closed_form(x_block["Q0"], x_block["C0"], rho0.x, t)
    return DegenerateProduct(xs, E @ ym, E @ yc @ E.T, E, float(np.exp(np.trace(C3) * t)))


@dataclass
class LyapunovSolution:
    K: np.ndarray
    residual: float
    method: str
    hormander: bool
    pbh_margin: float
    singular: bool


def hormander_condition(Q0, C, tol: float = 1e-8):
    """Check that no eigenvector of ``C^T`` lies in the kernel of ``Q0``.

    Uses the rank test on ``[C^T - mu I ; Q0]`` for every eigenvalue ``mu``
    of ``C``, which is insensitive to repeated eigenvalues. Returns the
    verdict and the smallest relative singular value found.
    """
    C = np.atleast_2d(np.asarray(C, float))
    Q0 = np.atleast_2d(np.asarray(Q0, float))
    d = C.shape[0]
    scale = max(np.linalg.norm(C, 2), np.linalg.norm(Q0, 2), 1e-300)
    worst = np.inf
    for mu in np.linalg.eigvals(C):
        M = np.vstack([C.T - mu * np.eye(d), Q0.astype(complex)])
        s = np.linalg.svd(M, compute_uv=False)[-1] / scale
        worst = min(worst, float(s))
    return worst > tol, worst


def lyapunov_solve(Q0, C, tol: float = 1e-8) -> LyapunovSolution:
    """Solve ``2 Q0 = C K + K C^T`` for a stable drift matrix ``C``.

    Diagonalizable ``C`` is handled in its eigenbasis, where the equation
    decouples entrywise; otherwise Bartels-Stewart is used. The residual
    is always recomputed.
    """
    C = np.atleast_2d(np.asarray(C, float))
    Q0 = np.atleast_2d(np.asarray(Q0, float))
    mu, V = np.linalg.eig(C)
    if np.any(mu.real <= 0):
        raise ValueError("drift matrix must have eigenvalues with positive real part")
    method = "eigenbasis"
    if np.linalg.cond(V) < 1e8:
        Vi = np.linalg.inv(V)
        Qt = Vi @ Q0 @ Vi.T
        Kt = 2 * Qt / (mu[:, None] + mu[None, :])
        K = (V @ Kt @ V.T).real
    else:
        method = "bartels-stewart"
        K = solve_continuous_lyapunov(C, 2 * Q0)
    K = 0.5 * (K + K.T)
    res = float(np.linalg.norm(C @ K + K @ C.T - 2 * Q0) / max(np.linalg.norm(Q0), 1e-300))
    if res > 1e-8:
        K = 0.5 * (solve_continuous_lyapunov(C, 2 * Q0) + solve_continuous_lyapunov(C, 2 * Q0).T)
        method = "bartels-stewart"
        res = float(np.linalg.norm(C @ K + K @ C.T - 2 * Q0) / max(np.linalg.norm(Q0), 1e-300))
    ok, margin = hormander_condition(Q0, C, tol)
    w = np.linalg.eigvalsh(K)
    singular = bool(w.min() <= tol * max(abs(w).max(), 1e-300))
    return LyapunovSolution(K, res, method, ok, margin, singular)


def gibbs_steady_state(model: LossModel, eps: float, sigma: float, box: Box, cells,
                       boundary_tol: float = 1e-6) -> GridDensity:
    """Normalized ``exp(-L / (eps^2 sigma))`` at cell centres."""
    axes = grid_axes(box, cells)
    g = GridDensity(axes, np.zeros([len(a) for a in axes]))
    logw = -model.value(g.points()) / (eps * eps * sigma)
    w = np.exp(logw - logw.max())
    g.values = w / (w.sum() * g.cell_volume)
    if g.boundary_mass() > boundary_tol:
        raise DomainTooSmallError(f"Gibbs density puts {g.boundary_mass():.2e} on the boundary")
    return g


@dataclass
class SteadyProbe:
    delta: float
    grid: GridDensity
    tail_masses: np.ndarray
    variances: np.ndarray
    drift: float


def steady_state_probe_delta_to_zero(model: LossModel, field_: DiffusionField, eps: float,
                                     deltas, box: Box, cells, horizon: float, radii,
                                     center=None, rho0=None, drift_tol: float = 1e-3) -> list:
    """Long-time grid densities for a decreasing list of injected noise levels.

    For each ``delta`` the noise-injected equation runs to ``horizon``. The
    run is accepted only if the L1 change over the final tenth of the
    horizon, per unit time, is below ``drift_tol``. Reported are the masses
    outside balls of the given radii and the per-axis variances.
    """
    c = np.zeros(model.dim) if center is None else np.asarray(center, float)
    if rho0 is None:
        rho0 = GaussianState(c, np.diag(((box.hi - box.lo) / 10) ** 2))
    out = []
    for delta in deltas:
        f = field_.with_delta(delta)
        g0 = init_grid(box, cells, rho0)
        solver = FokkerPlanckSolver(model, f, eps, g0.axes)
        mid = solver.evolve(g0, 0.9 * horizon)
        end = solver.evolve(mid, horizon)
        drift = end.l1_distance(mid) / (0.1 * horizon)
        if drift > drift_tol:
            raise HorizonError(f"delta={delta}: density still moving ({drift:.2e} per unit time)")
        tails = np.array([end.mass_outside_ball(c, r) for r in radii])
        out.append(SteadyProbe(float(delta), end, tails, np.diag(end.covariance()).copy(), drift))
    return out
