"""Simple domains (balls and boxes) and deterministic probe point sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

# fixed scramble seed so every probe set is reproducible
PROBE_SEED = 20240531


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball ``{x : |x - center| <= radius}``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.sum((X - self.center) ** 2, axis=-1) <= self.radius ** 2

    def crossing_fraction(self, X0, X1) -> np.ndarray:
        """Fraction ``s`` in [0, 1] at which the segment X0 -> X1 meets the sphere.

        X0 is assumed inside and X1 outside.
        """
        p = np.asarray(X0, float) - self.center
        q = np.asarray(X1, float) - np.asarray(X0, float)
        a = np.sum(q * q, axis=-1)
        b = 2.0 * np.sum(p * q, axis=-1)
        c = np.sum(p * p, axis=-1) - self.radius ** 2
        disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(a > 0, (-b + disc) / (2 * a), 1.0)
        return np.clip(s, 0.0, 1.0)

    def distance_to_boundary(self, X) -> np.ndarray:
        return self.radius - np.linalg.norm(np.asarray(X, float) - self.center, axis=-1)

    def outward_normal(self, X) -> np.ndarray:
        """Unit normal of the nearest boundary point (any unit vector at the centre)."""
        P = np.asarray(X, float) - self.center
        r = np.linalg.norm(P, axis=-1, keepdims=True)
        e = np.zeros_like(P)
        e[..., 0] = 1.0
        return np.where(r > 0, P / np.where(r > 0, r, 1.0), e)

    def project(self, X) -> np.ndarray:
        """Nearest boundary point."""
        return self.center + self.radius * self.outward_normal(X)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs matching lo < hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.all((X >= self.lo) & (X <= self.hi), axis=-1)

    def crossing_fraction(self, X0, X1) -> np.ndarray:
        X0 = np.asarray(X0, float)
        q = np.asarray(X1, float) - X0
        with np.errstate(divide="ignore", invalid="ignore"):
            s_hi = np.where(q > 0, (self.hi - X0) / q, np.inf)
            s_lo = np.where(q < 0, (self.lo - X0) / q, np.inf)
        s = np.min(np.minimum(s_hi, s_lo), axis=-1)
        return np.clip(np.where(np.isfinite(s), s, 1.0), 0.0, 1.0)

    def distance_to_boundary(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        return np.min(np.minimum(X - self.lo, self.hi - X), axis=-1)

    def _nearest_face(self, X):
        X = np.asarray(X, float)
        gaps = np.concatenate([X - self.lo, self.hi - X], axis=-1)
        k = np.argmin(gaps, axis=-1)
        return k % self.dim, k >= self.dim

    def outward_normal(self, X) -> np.ndarray:
        """Unit normal of the nearest face."""
        X = np.asarray(X, float)
        axis, upper = self._nearest_face(X)
        n = np.zeros_like(X)
        np.put_along_axis(n, axis[..., None], np.where(upper, 1.0, -1.0)[..., None], axis=-1)
        return n

    def project(self, X) -> np.ndarray:
        """Nearest boundary point."""
        X = np.array(X, float)
        axis, upper = self._nearest_face(X)
        face = np.where(upper, self.hi[axis], self.lo[axis])
        np.put_along_axis(X, axis[..., None], face[..., None], axis=-1)
        return X


def _sobol(dim: int, n: int, seed: int) -> np.ndarray:
    m = max(int(np.ceil(np.log2(max(n, 2)))), 1)
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def probe_points(domain, n: int = 256, seed: int = PROBE_SEED) -> np.ndarray:
    """Deterministic probe set covering a ball or box.

    The set always includes the center and the extreme points along each
    coordinate axis, followed by scrambled Sobol points (a quarter of them
    pushed to the boundary for a ball).
    """
    d = domain.dim
    c = domain.center
    fixed = [c]
    if isinstance(domain, Ball):
        r = domain.radius
        for i in range(d):
            e = np.zeros(d)
            e[i] = r
            fixed += [c - e, c + e]
        need = max(n - len(fixed), 0)
        pts = []
        k = 0
        while sum(len(p) for p in pts) < need:
            cube = (2.0 * _sobol(d, 4 * need + 8, seed + k) - 1.0) * r
            pts.append(cube[np.sum(cube ** 2, axis=1) <= r * r])
            k += 1
        inner = np.concatenate(pts)[:need] if need else np.empty((0, d))
        nb = len(inner) // 4
        if nb and d > 1:
            nrm = np.linalg.norm(inner[:nb], axis=1, keepdims=True)
            inner[:nb] = np.where(nrm > 0, inner[:nb] / np.maximum(nrm, 1e-300) * r, inner[:nb])
        return np.vstack([np.array(fixed), inner + c])
    lo, hi = domain.lo, domain.hi
    if d <= 10:
        corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij"))
        fixed += list(corners.reshape(d, -1).T)
    need = max(n - len(fixed), 0)
    inner = lo + (hi - lo) * _sobol(d, need, seed) if need else np.empty((0, d))
    return np.vstack([np.array(fixed), inner])
