"""How long does noisy gradient descent stay in a well?

Double well x^4/4 - x^2/2, barrier 1/4. Kramers' formula is compared to
the exact mean transition time (quadrature of the 1D exit-time equation)
and to a Monte Carlo estimate at a moderate temperature.
"""
# %%
import numpy as np

from sgdlab.domain import Box
from sgdlab.exit_time import kramers_estimate, met_1d_quadrature, saddle_scan_1d
from sgdlab.model import DiffusionField, double_well
from sgdlab.simulate import sample_exit_times

m = double_well(1, scale=0.25)
z = saddle_scan_1d(m, [-1.0], [1.0])
print("saddle at", z)

# %% prediction vs exact
print(" eps^2   Kramers      exact       ratio   eps^2 log T")
for e2 in (0.2, 0.1, 0.08, 0.05, 0.03, 0.02):
    k = kramers_estimate(m, [-1.0], z, np.sqrt(e2))
    x, u = met_1d_quadrature(m, np.sqrt(e2), -6.0, 1.0, left="reflecting")
    T = np.interp(-1.0, x, u)
    print(f" {e2:.2f}  {k:10.2f}  {T:10.2f}   {T / k:.3f}   {e2 * np.log(T):.3f}")
# the ratio tends to one, but eps^2 log T approaches 1/4 only like eps^2 log(prefactor)

# %% a quick Monte Carlo check at eps^2 = 0.1
f = DiffusionField(m, covariance=np.eye(1))
st = sample_exit_times(m, f, np.sqrt(0.1), Box([-6.0], [1.0]), [-1.0], 1000, 0.01, 5000.0, 4)
print(f"MC mean {st.mean:.2f} +- {st.se:.2f}, censored {st.censored_fraction:.3f}")
