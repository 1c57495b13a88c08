"""Particle schemes: minibatch SGD, noise-injected SGD and Euler-Maruyama.

Every step function accepts a single point ``(d,)`` or a batch ``(n, d)``
and a ``numpy.random.Generator``. Draw order inside one step is fixed:
minibatch keys first (only when ``batch_size < N``), then Gaussian noise
(only when the scheme has any). This keeps the noise-injected scheme with
``delta = 0`` draw-for-draw identical to plain SGD.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import snapshot
from .model import DiffusionField, DomainError, Hyperparams, LossModel
from .streams import BLOCK_LANES, block_generator, map_blocks

RNG_CHUNK = 64  # exit-time steps per random draw


class DivergenceError(RuntimeError):
    def __init__(self, msg, step=None, index=None):
        super().__init__(msg)
        self.step = step
        self.index = index


def draw_batches(rng, n: int, n_samples: int, batch_size: int):
    """Uniform subsets without replacement, one row per trajectory; ``None`` for full batch."""
    if batch_size >= n_samples:
        return None
    keys = rng.random((n, n_samples))
    return np.argpartition(keys, batch_size - 1, axis=1)[:, :batch_size]


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _minibatch_gradient(model, X, idx):
    return model.gradient(X) if idx is None else model.batch_gradient(X, idx)


def sgd_step(x, model: LossModel, hp: Hyperparams, rng):
    """One minibatch gradient step ``x - eta * mean_{i in B} grad L_i(x)``."""
    return nsgd_step(x, model, hp, 0.0, rng)


def nsgd_step(x, model: LossModel, hp: Hyperparams, delta: float, rng):
    """Minibatch step plus injected noise ``eta * Z`` with ``Z ~ N(0, delta I)``."""
    if delta < 0:
        raise ValueError("injected noise variance must be nonnegative")
    hp.validate(model)
    X, single = _as_batch(x)
    idx = draw_batches(rng, X.shape[0], model.n_samples, hp.batch_size)
    with np.errstate(all="ignore"):
        out = X - hp.eta * _minibatch_gradient(model, X, idx)
        if delta > 0:
            out = out + hp.eta * np.sqrt(delta) * rng.standard_normal(X.shape)
    _check_finite(out)
    return out[0] if single else out


def em_step(x, model: LossModel, field_: DiffusionField, eps: float, dt: float, rng):
    """Euler-Maruyama step ``x - grad L dt + sqrt(2 eps^2 dt) S xi`` with ``S S^T = Q + m_b delta I``."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    X, single = _as_batch(x)
    xi = rng.standard_normal(X.shape)
    with np.errstate(all="ignore"):
        out = _em_apply(X, model, field_, eps, dt, xi)
    _check_finite(out)
    return out[0] if single else out


def _check_finite(X):
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=-1))
    if bad.size:
        raise DivergenceError(f"non-finite update in row {bad[0]}", index=int(bad[0]))


def _em_apply(X, model, field_, eps, dt, xi):
    drift = model.gradient(X)
    S = field_.sqrt_effective(X)
    noise = np.einsum("...ij,...j->...i", S, xi)
    return X - drift * dt + np.sqrt(2.0 * eps * eps * dt) * noise


@dataclass
class EnsembleTrace:
    """Positions of ``M`` trajectories at recorded times.

    ``positions`` has shape ``(T, M, d)``. ``diverged`` holds the step at
    which each trajectory produced a non-finite state (-1 if never).
    """

    times: np.ndarray
    positions: np.ndarray
    root_seed: int
    scheme: str
    diverged: np.ndarray = None

    @property
    def streams(self):
        """``(block, lane)`` stream coordinates of every trajectory."""
        M = self.positions.shape[1]
        k = np.arange(M)
        lanes = min(BLOCK_LANES, M)
        return np.column_stack([k // lanes, k % lanes])

    @property
    def final(self):
        return self.positions[-1]

    def to_csv(self, path):
        T, M, d = self.positions.shape
        tt = np.repeat(self.times, M)
        kk = np.tile(np.arange(M), T)
        rows = np.column_stack([tt, kk, self.positions.reshape(T * M, d)])
        snapshot.write_csv(path, ["time", "trajectory"] + [f"x_{i + 1}" for i in range(d)], rows)

    def to_binary(self, path):
        snapshot.write_ensemble(path, self.times, self.positions)

    @classmethod
    def from_binary(cls, path, root_seed=-1, scheme=""):
        t, p = snapshot.read_ensemble(path)
        return cls(t, p, root_seed, scheme)


def _initial(x0, M, d):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (d,):
        return np.broadcast_to(x0, (M, d)).copy()
    if x0.shape == (M, d):
        return x0.copy()
    raise ValueError(f"initial state must have shape ({d},) or ({M}, {d})")


def gaussian_ensemble(mean, cov, M: int, root_seed: int, n_jobs: int = 1):
    """``M`` Gaussian samples drawn from the block streams (phase tag 1)."""
    mean = np.atleast_1d(np.asarray(mean, float))
    L = np.linalg.cholesky(np.atleast_2d(np.asarray(cov, float)) + 1e-300 * np.eye(mean.size))
    parts = map_blocks(lambda a, b, rng: mean + rng.standard_normal((b - a, mean.size)) @ L.T,
                       M, root_seed, tag=1, n_jobs=n_jobs)
    return np.concatenate(parts)


def _step_block(X, scheme, model, field_, hp, eps, dt, rng):
    if scheme == "em":
        xi = rng.standard_normal(X.shape)
        return _em_apply(X, model, field_, eps, dt, xi)
    idx = draw_batches(rng, X.shape[0], model.n_samples, hp.batch_size)
    out = X - hp.eta * _minibatch_gradient(model, X, idx)
    if scheme == "nsgd" and field_.delta > 0:
        out = out + hp.eta * np.sqrt(field_.delta) * rng.standard_normal(X.shape)
    return out


def run_ensemble(model: LossModel, field_: DiffusionField, x0, scheme: str, n_steps: int,
                 M: int, root_seed: int, hp: Hyperparams, dt: float | None = None,
                 stride: int = 1, n_jobs: int = 1, eps: float | None = None) -> EnsembleTrace:
    """Run ``M`` independent trajectories of ``sgd``, ``nsgd`` or ``em``.

    For the discrete schemes one step advances time by ``eta``. The
    Euler-Maruyama scheme uses ``eps^2 = eta / (2 m_b)`` unless ``eps`` is
    given, and step ``dt`` (default ``eta``). Snapshots are kept every ``stride`` steps, always
    including the initial state. Trajectories that blow up are frozen and
    flagged with their divergence step.
    """
    scheme = {"euler-maruyama": "em"}.get(scheme, scheme)
    if scheme not in ("sgd", "nsgd", "em"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if M < 1 or n_steps < 1:
        raise ValueError("need at least one trajectory and one step")
    hp.validate(model)
    d = model.dim
    X0 = _initial(x0, M, d)
    dt = hp.eta if dt is None else float(dt)
    step_time = hp.eta if scheme != "em" else dt
    eps = hp.epsilon if eps is None else float(eps)
    rec = list(range(0, n_steps + 1, stride))
    if rec[-1] != n_steps:
        rec.append(n_steps)

    def block(a, b, rng):
        X = X0[a:b].copy()
        out = np.empty((len(rec), b - a, d))
        div = np.full(b - a, -1)
        r = 0
        if rec[0] == 0:
            out[0] = X
            r = 1
        for k in range(1, n_steps + 1):
            with np.errstate(all="ignore"):
                Xn = _step_block(X, scheme, model, field_, hp, eps, dt, rng)
            bad = ~np.all(np.isfinite(Xn), axis=1) & (div < 0)
            div[bad] = k
            X = np.where((div < 0)[:, None], Xn, X)
            if r < len(rec) and rec[r] == k:
                out[r] = X
                r += 1
        return out, div

    parts = map_blocks(block, M, root_seed, n_jobs=n_jobs)
    pos = np.concatenate([p[0] for p in parts], axis=1)
    div = np.concatenate([p[1] for p in parts])
    tag = "euler-maruyama" if scheme == "em" else scheme
    return EnsembleTrace(np.array(rec, float) * step_time, pos, root_seed, tag, div)


# ----------------------------------------------------------------------------
# exit times


@dataclass
class ExitTimeStats:
    """First exit times of an ensemble; censored entries hold the horizon."""

    times: np.ndarray
    censored: np.ndarray
    exit_points: np.ndarray
    horizon: float
    root_seed: int

    @property
    def n(self):
        return self.times.size

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(self.censored))

    @property
    def lower_bound_only(self) -> bool:
        """True when more than half of the trajectories are censored."""
        return self.censored_fraction > 0.5

    @property
    def mean(self) -> float:
        """Mean over uncensored trajectories (``nan`` if all are censored)."""
        t = self.times[~self.censored]
        return float(t.mean()) if t.size else float("nan")

    @property
    def se(self) -> float:
        t = self.times[~self.censored]
        return float(t.std(ddof=1) / np.sqrt(t.size)) if t.size > 1 else np.inf

    @property
    def censored_mean(self) -> float:
        """Mean with censored entries held at the horizon; a lower bound on the true mean."""
        return float(np.mean(self.times))

    def to_csv(self, path):
        rows = np.column_stack([np.arange(self.n), self.times, self.censored.astype(float),
                                self.exit_points])
        d = self.exit_points.shape[1]
        snapshot.write_csv(path, ["trajectory", "exit_time", "censored"]
                           + [f"x_{i + 1}" for i in range(d)], rows)


def sample_exit_times(model: LossModel, field_: DiffusionField, eps: float, domain, x0,
                      M: int, dt: float, horizon: float, root_seed: int,
                      n_jobs: int = 1, bridge: bool = True, substeps: int = 1) -> ExitTimeStats:
    """Monte Carlo first exit times from ``domain`` under Euler-Maruyama.

    A step that lands outside is cut where the segment meets the boundary.
    With ``bridge`` a step that stays inside still counts as an exit with
    the Brownian-bridge probability ``exp(-2 d0 d1 / (s^2 dt))``, where
    ``d0, d1`` are the distances of its end points to the boundary and
    ``s^2 = 2 eps^2 n^T Q n`` is the noise variance along the outward
    normal. Such exits are placed mid-step at the nearest boundary point.
    This removes the ``O(sqrt(dt))`` bias of checking only at grid times.
    Trajectories still inside at ``horizon`` are censored there.

    Each step sums ``substeps`` standard normal draws (scaled by
    ``1/sqrt(substeps)``), so a run with ``dt`` and ``substeps=4`` follows
    the same Brownian path as a run with ``dt/4`` and ``substeps=1``; this
    couples step-refinement checks. Normals are drawn for all lanes whether
    or not they have exited; the bridge uniforms come from a separate
    stream.
    """
    d = model.dim
    X0 = _initial(x0, M, d)
    if not np.all(domain.contains(X0)):
        raise ValueError("initial states must lie inside the domain")
    n_steps = int(np.ceil(horizon / dt - 1e-9))
    const_S = field_.sqrt_effective(np.zeros(d)) if field_.is_constant else None
    amp = np.sqrt(2.0 * eps * eps * dt)

    lanes = min(BLOCK_LANES, M)
    # exp(-x) is exactly 0.0 for x > 746, so lanes with 2 d0 d1 > 746 s2_max cannot be killed
    s2_max = amp * amp * np.linalg.eigvalsh(const_S @ const_S.T).max() if const_S is not None else None

    def block(a, b, rng):
        urng = block_generator(root_seed, a // lanes, tag=3)
        X = X0[a:b].copy()
        n = b - a
        tau = np.full(n, float(horizon))
        cens = np.ones(n, dtype=bool)
        xe = X.copy()
        dist = domain.distance_to_boundary(X)
        act = np.arange(n)
        for k in range(n_steps):
            # draws are made in chunks; the streams are consumed in the same order as step by step
            c = k % RNG_CHUNK
            if c == 0:
                xis = rng.standard_normal((RNG_CHUNK, substeps, n, d)).sum(axis=1) / np.sqrt(substeps)
                us = urng.random((RNG_CHUNK, n)) if bridge else None
            if act.size == 0:
                break
            Y = X[act]
            S = const_S if const_S is not None else field_.sqrt_effective(Y)
            xi = xis[c, act]
            dW = xi @ S.T if const_S is not None else np.einsum("nij,nj->ni", S, xi)
            Yn = Y - model.gradient(Y) * dt + amp * dW
            if not np.all(np.isfinite(Yn)):
                raise DomainError("non-finite state while sampling exit times")
            out = ~domain.contains(Yn)
            if np.any(out):
                s = domain.crossing_fraction(Y[out], Yn[out])
                j = act[out]
                tau[j] = (k + s) * dt
                cens[j] = False
                xe[j] = Y[out] + s[:, None] * (Yn[out] - Y[out])
            d1 = domain.distance_to_boundary(Yn)
            if bridge:
                d0 = dist[act]
                near = ~out
                if s2_max is not None:
                    near &= 2.0 * d0 * d1 <= 746.0 * s2_max
                inside = np.flatnonzero(near)
                if inside.size:
                    nrm = domain.outward_normal(Yn[inside])
                    Sn = nrm @ S if const_S is not None else np.einsum("ni,nij->nj", nrm, S[inside])
                    s2 = amp * amp * np.sum(Sn * Sn, axis=-1)
                    with np.errstate(divide="ignore", over="ignore"):
                        p = np.where(s2 > 0, np.exp(-2.0 * d0[inside] * d1[inside]
                                                    / np.where(s2 > 0, s2, 1.0)), 0.0)
                    hit = us[c, act[inside]] < p
                    if np.any(hit):
                        j = act[inside[hit]]
                        tau[j] = (k + 0.5) * dt
                        cens[j] = False
                        xe[j] = domain.project(0.5 * (Y[inside[hit]] + Yn[inside[hit]]))
                        out[inside[hit]] = True
            X[act] = Yn
            dist[act] = d1
            act = act[~out]
        return tau, cens, xe

    parts = map_blocks(block, M, root_seed, tag=2, n_jobs=n_jobs)
    return ExitTimeStats(np.concatenate([p[0] for p in parts]),
                         np.concatenate([p[1] for p in parts]),
                         np.concatenate([p[2] for p in parts]), float(horizon), root_seed)


# ----------------------------------------------------------------------------
# weak order


@dataclass
class WeakErrorCurve:
    etas: np.ndarray
    errors: np.ndarray
    se: np.ndarray
    resolved: np.ndarray
    horizon: float
    root_seed: int
    discrete_means: np.ndarray = field(default=None)
    continuous_means: np.ndarray = field(default=None)

    @property
    def slope(self) -> float:
        """Least-squares slope of log error against log eta."""
        return float(np.polyfit(np.log(self.etas), np.log(self.errors), 1)[0])

    def to_csv(self, path):
        snapshot.write_csv(path, ["eta", "error", "se", "resolved"],
                           np.column_stack([self.etas, self.errors, self.se, self.resolved]))


def weak_error_curve(model: LossModel, field_: DiffusionField, g, etas, horizon: float,
                     M: int, root_seed: int, x0, batch_size: int = 1, substeps: int = 50,
                     n_jobs: int = 1) -> WeakErrorCurve:
    """Weak error ``|E g(theta_n) - E g(X_{n eta})|`` of (noise-injected) SGD.

    The continuous process is Euler-Maruyama with ``eps^2 = eta / (2 m_b)``
    and step ``eta / substeps``. Both chains read the same substep normals;
    the discrete injected noise is ``eta sqrt(delta)`` times their
    normalized sum, so the coupling is exact for the injected part. The
    error estimate is the mean of paired differences; a point is flagged
    unresolved when its standard error exceeds half the gap to the next
    smaller learning rate.
    """
    etas = np.sort(np.asarray(etas, float))[::-1]
    if np.any(np.diff(etas) >= 0):
        raise ValueError("learning rates must be distinct")
    Hyperparams(float(etas[0]), batch_size).validate(model)
    d = model.dim
    X0 = _initial(x0, M, d)
    fld = DiffusionField.__new__(DiffusionField)
    fld.__dict__.update(field_.__dict__)
    fld.batch_size = batch_size
    delta = fld.delta
    const_S = fld.sqrt_effective(np.zeros(d)) if fld.is_constant else None
    errs, ses, dm, cm = [], [], [], []
    for j, eta in enumerate(etas):
        n = int(round(horizon / eta))
        h = eta / substeps
        amp = np.sqrt(eta / batch_size * h)  # sqrt(2 eps^2 h)

        def block(a, b, rng):
            th = X0[a:b].copy()
            X = X0[a:b].copy()
            for _ in range(n):
                idx = draw_batches(rng, b - a, model.n_samples, batch_size)
                xi = rng.standard_normal((substeps, b - a, d))
                th_new = th - eta * _minibatch_gradient(model, th, idx)
                if delta > 0:
                    th_new += eta * np.sqrt(delta) * xi.sum(axis=0) / np.sqrt(substeps)
                th = th_new
                for k in range(substeps):
                    dW = xi[k] @ const_S.T if const_S is not None else \
                        np.einsum("nij,nj->ni", fld.sqrt_effective(X), xi[k])
                    X = X - model.gradient(X) * h + amp * dW
            return np.asarray(g(th), float), np.asarray(g(X), float)

        parts = map_blocks(block, M, root_seed, tag=10 + j, n_jobs=n_jobs)
        gd = np.concatenate([p[0] for p in parts])
        gc = np.concatenate([p[1] for p in parts])
        diff = gd - gc
        errs.append(abs(diff.mean()))
        ses.append(diff.std(ddof=1) / np.sqrt(M))
        dm.append(gd.mean())
        cm.append(gc.mean())
    errs, ses = np.array(errs), np.array(ses)
    gaps = np.abs(np.diff(errs))
    resolved = np.ones(len(etas), dtype=bool)
    resolved[:-1] = ses[:-1] <= 0.5 * gaps
    resolved[-1] = ses[-1] <= 0.5 * gaps[-1] if len(gaps) else True
    return WeakErrorCurve(etas, errs, ses, resolved, float(horizon), root_seed,
                          np.array(dm), np.array(cm))
