"""Noise acting on one coordinate only.

With Q = diag(1, 0) and a diagonal Hessian the steady state is a
Gaussian in x times a point mass in y; the Lyapunov solve flags this
as singular. Coupling the axes through the drift restores a density.
"""
# %%
import numpy as np

from sgdlab.asymptotics import gaussian_w2, linearize_at_minimum, product_w2_bound
from sgdlab.fokker_planck import (GaussianState, ProductDatum, degenerate_product_solution,
                                  lyapunov_solve)
from sgdlab.model import DiffusionField, anisotropic_quadratic

Q = np.diag([1.0, 0.0])
for C in (np.diag([1.0, 2.0]), np.array([[2.0, 1.0], [1.0, 2.0]])):
    sol = lyapunov_solve(Q, C)
    lin = linearize_at_minimum(anisotropic_quadratic(C), DiffusionField(anisotropic_quadratic(C), covariance=Q),
                               [0.0, 0.0], 0.5)
    print(f"C = {C.tolist()}: singular={sol.singular}, kind={lin.kind}")
    print(np.round(lin.steady_state.cov, 4))

# %% convergence to Gaussian x point mass in W2
rho0 = ProductDatum(GaussianState([1.0], [[0.5]]), [0.5], [[0.75]])
inf = GaussianState([0.0], [[1.0]])
for t in (0.0, 1.0, 2.0, 5.0, 10.0):
    u = degenerate_product_solution({"Q0": [[1.0]], "C0": [[1.0]]}, {"C3": [[0.75]]}, rho0, t)
    b = product_w2_bound(gaussian_w2(u.x, inf), u.y_second_moment())
    print(f"t = {t:4.1f}: second moment {u.second_moment():.5f}, W2 bound {b:.2e}")
