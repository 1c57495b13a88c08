"""Loss landscapes, their derivatives and the gradient-noise covariance.

A :class:`LossModel` is an average of ``N`` partial losses,
``L = (1/N) sum_i L_i``. All evaluation routines are vectorized over any
number of leading axes, so ``X`` may be a single point of shape ``(d,)``,
an ensemble ``(M, d)`` or a grid ``(n1, n2, d)``.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain import Ball, Box, probe_points


class DomainError(ValueError):
    """A loss, gradient or Hessian evaluated to a non-finite number."""

    def __init__(self, msg, sample_index=None):
        super().__init__(msg)
        self.sample_index = sample_index


class DimensionError(ValueError):
    pass


class NotPSDError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PartialLoss:
    """One summand ``L_i`` with vectorized value, gradient and Hessian."""

    value: Callable
    gradient: Callable
    hessian: Callable


class LossModel:
    """Mean of partial losses on ``R^d``.

    Parameters
    ----------
    dim : int
        Parameter dimension ``d``.
    samples : list of PartialLoss
        The ``N`` partial losses.
    kind : str
        ``"catalog"``, ``"dataset"`` or ``"custom"``.
    name : str
        Label used in reports.
    """

    def __init__(self, dim: int, samples: list, kind: str = "custom", name: str = ""):
        if dim < 1:
            raise DimensionError("dimension must be at least 1")
        if len(samples) < 1:
            raise ValueError("need at least one partial loss")
        self.dim = int(dim)
        self.samples = list(samples)
        self.kind = kind
        self.name = name or kind

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise DimensionError(f"expected trailing dimension {self.dim}, got {X.shape}")
        return X

    # per-sample evaluations, stacked along a new leading axis
    def sample_values(self, X):
        X = self._check(X)
        return np.stack([np.broadcast_to(s.value(X), X.shape[:-1]) for s in self.samples])

    def sample_gradients(self, X):
        X = self._check(X)
        return np.stack([np.broadcast_to(s.gradient(X), X.shape) for s in self.samples])

    def sample_hessians(self, X):
        X = self._check(X)
        shp = X.shape + (self.dim,)
        return np.stack([np.broadcast_to(s.hessian(X), shp) for s in self.samples])

    def value(self, X):
        if self.n_samples == 1:
            X = self._check(X)
            return np.broadcast_to(self.samples[0].value(X), X.shape[:-1]).astype(float)
        return self.sample_values(X).mean(axis=0)

    def gradient(self, X):
        if self.n_samples == 1:
            X = self._check(X)
            return np.broadcast_to(self.samples[0].gradient(X), X.shape).astype(float)
        return self.sample_gradients(X).mean(axis=0)

    def hessian(self, X):
        if self.n_samples == 1:
            X = self._check(X)
            return np.broadcast_to(self.samples[0].hessian(X), X.shape + (self.dim,)).astype(float)
        return self.sample_hessians(X).mean(axis=0)

    def batch_gradient(self, X, idx):
        """Minibatch gradient ``(1/m) sum_{i in B} grad L_i`` for each row.

        ``X`` has shape ``(n, d)`` and ``idx`` has shape ``(n, m)``.
        """
        G = self.sample_gradients(X)  # (N, n, d)
        n = X.shape[0]
        sel = G[idx, np.arange(n)[:, None], :]  # (n, m, d)
        return sel.mean(axis=1)

    def gradient_covariance_factor(self, X):
        """Rows ``(g_i - g)/sqrt(N)`` so that ``Q = T^T T``; shape ``(..., N, d)``."""
        G = self.sample_gradients(X)
        G = np.moveaxis(G, 0, -2)
        return (G - G.mean(axis=-2, keepdims=True)) / np.sqrt(self.n_samples)

    def check_nonnegative(self, domain, n_probes: int = 256) -> bool:
        """True when every partial loss is nonnegative on the probe set of ``domain``."""
        P = probe_points(domain, n_probes)
        return bool(np.all(self.sample_values(P) >= -1e-12))


class DatasetQuadratic(LossModel):
    """Least squares ``L_i(x) = (a_i . x - y_i)^2 / 2`` over a dataset."""

    def __init__(self, A, y, name: str = "dataset"):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if A.shape[0] != y.size:
            raise ValueError("A and y disagree on the number of rows")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise DomainError("dataset contains non-finite entries")
        self.A, self.y = A, y
        samples = [_dataset_row(A[i], y[i]) for i in range(A.shape[0])]
        super().__init__(A.shape[1], samples, kind="dataset", name=name)

    def residuals(self, X):
        X = self._check(X)
        return X @ self.A.T - self.y  # (..., N)

    def sample_values(self, X):
        return np.moveaxis(0.5 * self.residuals(X) ** 2, -1, 0)

    def sample_gradients(self, X):
        r = self.residuals(X)
        return np.moveaxis(r[..., :, None] * self.A, -2, 0)

    def sample_hessians(self, X):
        X = self._check(X)
        H = np.einsum("ni,nj->nij", self.A, self.A)
        return np.broadcast_to(H.reshape((H.shape[0],) + (1,) * (X.ndim - 1) + H.shape[1:]),
                               (H.shape[0],) + X.shape + (self.dim,))

    def value(self, X):
        return np.mean(0.5 * self.residuals(X) ** 2, axis=-1)

    def gradient(self, X):
        return self.residuals(X) @ self.A / self.n_samples

    def hessian(self, X):
        X = self._check(X)
        H = self.A.T @ self.A / self.n_samples
        return np.broadcast_to(H, X.shape + (self.dim,))

    def batch_gradient(self, X, idx):
        Asel = self.A[idx]  # (n, m, d)
        r = np.einsum("nmd,nd->nm", Asel, X) - self.y[idx]
        return np.einsum("nm,nmd->nd", r, Asel) / idx.shape[1]


def _dataset_row(a, yi):
    return PartialLoss(
        value=lambda X: 0.5 * (X @ a - yi) ** 2,
        gradient=lambda X: (X @ a - yi)[..., None] * a,
        hessian=lambda X: np.broadcast_to(np.outer(a, a), np.shape(X) + (a.size,)),
    )


def load_dataset_csv(path) -> DatasetQuadratic:
    """Read a dataset with header ``a_1,...,a_d,y`` into a least-squares model."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty dataset")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[-1] != "y" or any(
        re.fullmatch(rf"a_{i + 1}", h) is None for i, h in enumerate(header[:-1])
    ):
        raise ConfigError(f"{path}: header must read a_1,...,a_d,y")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != d + 1:
        raise ConfigError(f"{path}: ragged or empty data rows")
    return DatasetQuadratic(data[:, :d], data[:, d], name=str(path))


# ----------------------------------------------------------------------------
# analytic catalog


def _eye_like(X, d):
    return np.broadcast_to(np.eye(d), np.shape(X)[:-1] + (d, d))


def quadratic(lam: float = 1.0, dim: int = 1, center=None) -> LossModel:
    """Isotropic quadratic ``lam |x - c|^2 / 2``."""
    c = np.zeros(dim) if center is None else np.asarray(center, float)
    part = PartialLoss(
        value=lambda X: 0.5 * lam * np.sum((X - c) ** 2, axis=-1),
        gradient=lambda X: lam * (X - c),
        hessian=lambda X: lam * _eye_like(X, dim),
    )
    return LossModel(dim, [part], kind="catalog", name="quadratic")


def anisotropic_quadratic(matrix, center=None) -> LossModel:
    """Quadratic ``(x - c)^T C (x - c) / 2`` with symmetric positive ``C``."""
    C = np.atleast_2d(np.asarray(matrix, float))
    S = 0.5 * (C + C.T)
    d = S.shape[0]
    c = np.zeros(d) if center is None else np.asarray(center, float)
    part = PartialLoss(
        value=lambda X: 0.5 * np.einsum("...i,ij,...j->...", X - c, S, X - c),
        gradient=lambda X: (X - c) @ S,
        hessian=lambda X: np.broadcast_to(S, np.shape(X)[:-1] + (d, d)),
    )
    return LossModel(d, [part], kind="catalog", name="anisotropic_quadratic")


def polynomial_radial(p: float = 4.0, dim: int = 1) -> LossModel:
    """Radial power ``|x|^p / p``; requires ``p >= 2`` for a finite Hessian at 0."""
    if p < 2:
        raise ValueError("radial power needs p >= 2")

    def grad(X):
        r2 = np.sum(X * X, axis=-1, keepdims=True)
        return r2 ** ((p - 2) / 2) * X

    def hess(X):
        r2 = np.sum(X * X, axis=-1)[..., None, None]
        outer = X[..., :, None] * X[..., None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(r2 > 0, (p - 2) * r2 ** ((p - 4) / 2) * outer, 0.0)
        return r2 ** ((p - 2) / 2) * _eye_like(X, dim) + extra

    part = PartialLoss(
        value=lambda X: np.sum(X * X, axis=-1) ** (p / 2) / p,
        gradient=grad,
        hessian=hess,
    )
    return LossModel(dim, [part], kind="catalog", name="polynomial_radial")


def exponential_valley() -> LossModel:
    """``exp(x1) + x2^2 / 2``: convex, no minimizer, infimum 0."""

    def hess(X):
        H = np.zeros(np.shape(X) + (2,))
        H[..., 0, 0] = np.exp(X[..., 0])
        H[..., 1, 1] = 1.0
        return H

    part = PartialLoss(
        value=lambda X: np.exp(X[..., 0]) + 0.5 * X[..., 1] ** 2,
        gradient=lambda X: np.stack([np.exp(X[..., 0]), X[..., 1]], axis=-1),
        hessian=hess,
    )
    return LossModel(2, [part], kind="catalog", name="exponential_valley")


def product_well() -> LossModel:
    """``x1^2 x2^2 / 2``: zero on both axes, non-isolated minima."""

    def hess(X):
        x, y = X[..., 0], X[..., 1]
        H = np.empty(np.shape(X) + (2,))
        H[..., 0, 0] = y * y
        H[..., 1, 1] = x * x
        H[..., 0, 1] = H[..., 1, 0] = 2 * x * y
        return H

    part = PartialLoss(
        value=lambda X: 0.5 * (X[..., 0] * X[..., 1]) ** 2,
        gradient=lambda X: np.stack([X[..., 0] * X[..., 1] ** 2, X[..., 0] ** 2 * X[..., 1]], axis=-1),
        hessian=hess,
    )
    return LossModel(2, [part], kind="catalog", name="product_well")


def double_well(dim: int = 1, scale: float = 1.0, tilt: float = 0.0,
                offset: float = 0.0, y_stiffness: float = 1.0) -> LossModel:
    """``scale (x^2 - 1)^2 + tilt x + offset``, plus ``y_stiffness y^2`` when ``dim == 2``.

    ``scale=0.25`` gives the classic quartic ``x^4/4 - x^2/2`` shifted by 1/4.
    """
    if dim not in (1, 2):
        raise ValueError("double well is defined for dim 1 or 2")
    s, a, k = float(scale), float(tilt), float(y_stiffness)

    def value(X):
        x = X[..., 0]
        v = s * (x * x - 1) ** 2 + a * x + offset
        if dim == 2:
            v = v + k * X[..., 1] ** 2
        return v

    def grad(X):
        x = X[..., 0]
        gx = 4 * s * x * (x * x - 1) + a
        if dim == 1:
            return gx[..., None]
        return np.stack([gx, 2 * k * X[..., 1]], axis=-1)

    def hess(X):
        H = np.zeros(np.shape(X) + (dim,))
        H[..., 0, 0] = s * (12 * X[..., 0] ** 2 - 4)
        if dim == 2:
            H[..., 1, 1] = 2 * k
        return H

    return LossModel(dim, [PartialLoss(value, grad, hess)], kind="catalog", name="double_well")


CATALOG = {
    "quadratic": quadratic,
    "anisotropic_quadratic": anisotropic_quadratic,
    "polynomial_radial": polynomial_radial,
    "exponential_valley": exponential_valley,
    "product_well": product_well,
    "double_well": double_well,
}


def catalog(key: str, **params) -> LossModel:
    """Build an analytic loss by catalog key."""
    try:
        factory = CATALOG[key]
    except KeyError:
        raise ConfigError(f"unknown catalog key {key!r}; choose from {sorted(CATALOG)}") from None
    return factory(**params)


@dataclass(frozen=True)
class Hyperparams:
    """Learning rate and batch size; the temperature is derived, never stored."""

    eta: float
    batch_size: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("learning rate must be positive")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch size must be a positive integer")

    @property
    def epsilon_squared(self) -> float:
        return self.eta / (2.0 * self.batch_size)

    @property
    def epsilon(self) -> float:
        return float(np.sqrt(self.epsilon_squared))

    def validate(self, model: LossModel):
        if self.batch_size > model.n_samples:
            raise ConfigError(f"batch size {self.batch_size} exceeds sample count {model.n_samples}")
        return self


# ----------------------------------------------------------------------------
# PSD helpers


def _sym(Q):
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def matrix_sqrt_psd(Q, tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a PSD matrix (or a stack of them).

    Eigenvalues in ``[-tol*s, 0)`` are treated as zero, where ``s`` is the
    spectral radius of each matrix; anything more negative raises
    :class:`NotPSDError`.
    """
    Q = np.asarray(Q, dtype=float)
    scale = np.maximum(np.max(np.abs(Q), axis=(-1, -2)), 1e-300)
    asym = np.max(np.abs(Q - np.swapaxes(Q, -1, -2)), axis=(-1, -2))
    if np.any(asym > tol * scale * 10):
        raise NotPSDError("matrix is not symmetric")
    w, V = np.linalg.eigh(_sym(Q))
    thr = tol * np.maximum(np.max(np.abs(w), axis=-1, keepdims=True), 1e-300)
    if np.any(w < -thr):
        raise NotPSDError(f"negative eigenvalue {w.min():.3e}")
    w = np.where(w < thr, 0.0, w)
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def clamp_psd(Q, tol: float = 1e-10) -> np.ndarray:
    """Symmetrize and zero eigenvalues below ``tol * trace``."""
    Q = _sym(np.asarray(Q, float))
    w, V = np.linalg.eigh(Q)
    tr = np.trace(Q, axis1=-2, axis2=-1)[..., None]
    w = np.where(w < tol * np.maximum(tr, 0.0), 0.0, w)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


class DiffusionField:
    """Gradient-noise covariance ``Q(x)`` with optional isotropic injection.

    Parameters
    ----------
    model : LossModel
    delta : float
        Variance of the injected Gaussian noise per step (0 for plain SGD).
    batch_size : int
        Minibatch size ``m_b``; enters the injected part of the diffusion.
    psd_tol : float
        Relative eigenvalue clamp.
    covariance : array_like or callable, optional
        Prescribed ``Q`` replacing the sample covariance. A constant
        ``(d, d)`` matrix or a vectorized callable ``X -> (..., d, d)``.

    Notes
    -----
    :meth:`effective` returns ``Q + m_b delta I``, the matrix multiplying
    ``eps^2`` in the diffusion operator; with ``delta=0`` it is just ``Q``.
    """

    def __init__(self, model: LossModel, delta: float = 0.0, batch_size: int = 1,
                 psd_tol: float = 1e-10, covariance=None):
        if delta < 0:
            raise ConfigError("injected noise variance must be nonnegative")
        self.model = model
        self.delta = float(delta)
        self.batch_size = int(batch_size)
        self.psd_tol = psd_tol
        self._const = None
        self._fn = None
        if covariance is not None:
            if callable(covariance):
                self._fn = covariance
            else:
                C = np.atleast_2d(np.asarray(covariance, float))
                if C.shape != (model.dim, model.dim):
                    raise DimensionError("prescribed covariance has the wrong shape")
                matrix_sqrt_psd(C, psd_tol)  # validates
                self._const = _sym(C)

    def with_delta(self, delta: float) -> "DiffusionField":
        f = DiffusionField.__new__(DiffusionField)
        f.__dict__.update(self.__dict__)
        f.delta = float(delta)
        return f

    @property
    def is_constant(self) -> bool:
        return self._const is not None or (self._fn is None and self.model.n_samples == 1)

    def covariance(self, X, clamp: bool = True):
        """``Q`` at each point; shape ``X.shape + (d,)``."""
        X = np.asarray(X, float)
        d = self.model.dim
        if self._const is not None:
            return np.broadcast_to(self._const, X.shape[:-1] + (d, d))
        if self._fn is not None:
            Q = np.broadcast_to(np.asarray(self._fn(X), float), X.shape[:-1] + (d, d))
        elif self.model.n_samples == 1:
            return np.zeros(X.shape[:-1] + (d, d))
        else:
            T = self.model.gradient_covariance_factor(X)
            Q = np.swapaxes(T, -1, -2) @ T
        if not np.all(np.isfinite(Q)):
            raise DomainError("non-finite gradient covariance")
        return clamp_psd(Q, self.psd_tol) if clamp else _sym(Q)

    def regularized(self, X):
        """``Q / m_b + delta I``, the per-step noise covariance of the injected scheme."""
        Q = self.covariance(X)
        return Q / self.batch_size + self.delta * np.eye(self.model.dim)

    def effective(self, X, clamp: bool = True):
        Q = self.covariance(X, clamp=clamp)
        if self.delta:
            Q = Q + self.batch_size * self.delta * np.eye(self.model.dim)
        return Q

    def sqrt_effective(self, X):
        if self.is_constant:
            S = matrix_sqrt_psd(self.effective(np.zeros(self.model.dim)), self.psd_tol)
            return np.broadcast_to(S, np.shape(X) + (self.model.dim,))
        return matrix_sqrt_psd(self.effective(X, clamp=False), self.psd_tol)

    def diagonal(self, X, tol: float = 1e-12):
        """Diagonal of the effective diffusion; raises if it is not diagonal."""
        D = self.effective(X)
        off = D - np.einsum("...ii->...i", D)[..., None] * np.eye(self.model.dim)
        scale = max(float(np.max(np.abs(D))), 1.0)
        if np.max(np.abs(off), initial=0.0) > tol * scale:
            raise ValueError("grid solver needs a diagonal diffusion matrix")
        return np.einsum("...ii->...i", D)


@dataclass
class PointEvaluation:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    covariance: np.ndarray
    sample_gradients: np.ndarray


def evaluate(model: LossModel, x, field_: DiffusionField | None = None) -> PointEvaluation:
    """Loss, gradient, Hessian, noise covariance and the ``(N, d)`` per-sample gradients."""
    x = np.asarray(x, float)
    if x.shape != (model.dim,):
        raise DimensionError(f"expected a point of shape ({model.dim},)")
    vals = model.sample_values(x)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise DomainError(f"partial loss {bad[0]} is not finite at {x}", int(bad[0]))
    G = model.sample_gradients(x)
    bad = np.flatnonzero(~np.all(np.isfinite(G), axis=-1))
    if bad.size:
        raise DomainError(f"gradient of partial loss {bad[0]} is not finite", int(bad[0]))
    H = model.hessian(x)
    if not np.all(np.isfinite(H)):
        raise DomainError("Hessian is not finite")
    f = field_ or DiffusionField(model)
    return PointEvaluation(float(vals.mean()), G.mean(axis=0), np.array(H), f.covariance(x), G)


def covariance_matrix(field_: DiffusionField, x) -> np.ndarray:
    return field_.covariance(np.asarray(x, float))


def regularize(field_: DiffusionField, x, delta: float | None = None) -> np.ndarray:
    """``Q/m_b + delta I``; positive definite for ``delta > 0``."""
    f = field_ if delta is None else field_.with_delta(delta)
    return f.regularized(np.asarray(x, float))


def lambda_convexity(model: LossModel, center, radius: float, n_probes: int = 256) -> float:
    """Smallest Hessian eigenvalue over a deterministic probe set of a ball.

    A nonpositive result means the ball is not certified convex.
    """
    P = probe_points(Ball(center, radius), n_probes)
    H = model.hessian(P)
    if not np.all(np.isfinite(H)):
        raise DomainError("Hessian is not finite on the probe set")
    return float(np.min(np.linalg.eigvalsh(_sym(H))))


@dataclass
class Minimum:
    x: np.ndarray
    value: float
    hessian: np.ndarray


@dataclass
class MinimaSearch:
    minima: list
    outcomes: list = field(default_factory=list)  # one (status, point) per start


def _descend(model, x, box, gtol, max_iter):
    v = float(model.value(x))
    t = 1.0
    for _ in range(max_iter):
        g = model.gradient(x)
        gn2 = float(g @ g)
        if np.sqrt(gn2) <= gtol:
            return "converged", x
        while True:
            xn = x - t * g
            vn = float(model.value(xn))
            if np.isfinite(vn) and vn <= v - 1e-4 * t * gn2:
                break
            t *= 0.5
            if t < 1e-16:
                return "stalled", x
        x, v = xn, vn
        if not box.contains(x):
            return "boundary", x
        t = min(2.0 * t, 1.0)
    return "budget", x


def search_minima(model: LossModel, box: Box, n_starts: int = 32, gtol: float = 1e-9,
                  max_iter: int = 20000, merge_tol: float = 1e-4) -> MinimaSearch:
    """Multi-start gradient descent with backtracking from Sobol points of ``box``."""
    starts = probe_points(box, n_starts)
    found, outcomes = [], []
    for x0 in starts:
        status, x = _descend(model, np.array(x0, float), box, gtol, max_iter)
        outcomes.append((status, x))
        if status != "converged":
            continue
        H = model.hessian(x)
        w = np.linalg.eigvalsh(_sym(H))
        if w.min() < -1e-8 * max(1.0, np.abs(w).max()):
            outcomes[-1] = ("saddle", x)
            continue
        if all(np.linalg.norm(x - m.x) > merge_tol * box.diameter for m in found):
            found.append(Minimum(x, float(model.value(x)), np.array(H)))
    found.sort(key=lambda m: tuple(m.x))
    return MinimaSearch(found, outcomes)


def locate_minima(model: LossModel, box: Box, n_starts: int = 32, **kw) -> list:
    """Local minimizers inside ``box`` (empty if every start runs off the box)."""
    return search_minima(model, box, n_starts, **kw).minima
