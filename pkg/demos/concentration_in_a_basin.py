"""Iterates started near a minimum stay in a shrinking ball.

The ball radius decreases like exp(-lam t / 2) down to a eps^alpha. The
smoothed mass inside must stay within beta of its initial value.
"""
# %%
import numpy as np

from sgdlab.concentration import CutoffSpec, concentration_report, concentration_time
from sgdlab.model import DiffusionField, Hyperparams, double_well, lambda_convexity
from sgdlab.simulate import gaussian_ensemble, run_ensemble

m = double_well(2)
f = DiffusionField(m, delta=0.5)
center = np.array([1.0, 0.0])
lam = 0.95 * lambda_convexity(m, center, 0.3)
print(f"convexity constant on the basin ball: {lam:.3f}")

for eps in (0.02, 0.01):
    spec = CutoffSpec(center, 0.2, 0.5, lam)
    T = concentration_time(0.2, lam, eps, 1.0, 0.5)
    n = int(np.ceil(T / 1e-3))
    X0 = gaussian_ensemble(center, 0.01 * np.eye(2), 5000, 3)
    tr = run_ensemble(m, f, X0, "em", n, 5000, 5, Hyperparams(2 * eps ** 2, 1), dt=T / n, stride=20)
    rep = concentration_report(tr, spec, 1.0, 0.5, 0.1, eps, sigma=1.0)
    print(f"eps = {eps}: T_eps = {T:.3f}, mass {rep.mass[0]:.3f} -> {rep.mass[-1]:.3f}, "
          f"margin {rep.margin:.3f}, budget {rep.budget:.3g}")
