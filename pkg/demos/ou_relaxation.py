"""Relaxation of SGD on a quadratic loss, three ways.

The diffusion approximation of SGD on L(x) = |x|^2 / 2 is an
Ornstein-Uhlenbeck process, so the grid solver, a Monte Carlo ensemble
and the closed form can all be put side by side.
"""
# %%
import numpy as np

from sgdlab.concentration import second_moment
from sgdlab.domain import Box
from sgdlab.fokker_planck import FokkerPlanckSolver, GaussianState, init_grid, ou_closed_form
from sgdlab.model import DiffusionField, Hyperparams, quadratic
from sgdlab.simulate import run_ensemble

eps = 0.1
m = quadratic(1.0, 1)
f = DiffusionField(m, covariance=[[1.0]])
rho0 = GaussianState([0.3], [[0.02]])

# %% grid solution against the exact Gaussian law
g = init_grid(Box([-1.5], [1.5]), 400, rho0)
solver = FokkerPlanckSolver(m, f, eps, g.axes)
_, snaps = solver.evolve(g, 4.0, record_every=1.0)
print(" t    mean(grid)  mean(exact)  var(grid)   var(exact)  L1 error")
for s in snaps:
    ex = ou_closed_form([[eps ** 2]], [[1.0]], rho0, s.t)
    print(f"{s.t:3.1f}  {s.mean()[0]: .6f}   {ex.mean[0]: .6f}    {s.covariance()[0, 0]:.6f}    "
          f"{ex.cov[0, 0]:.6f}    {s.l1_distance(ex.pdf):.1e}")

# %% the same law sampled by Euler-Maruyama
X0 = np.random.default_rng(0).normal(0.3, np.sqrt(0.02), size=(20000, 1))
tr = run_ensemble(m, f, X0, "em", 400, 20000, 1, Hyperparams(2 * eps ** 2, 1), dt=0.01, stride=100)
for t, X in zip(tr.times, tr.positions):
    v, se = second_moment(X)
    print(f"t = {t:3.1f}: E x^2 = {v:.5f} +- {se:.5f}")
print(f"stationary value eps^2 sigma / lam = {eps ** 2:.5f}")
