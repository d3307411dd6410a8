"""
How ensemble size shrinks the Jacobian norm
===========================================

With iid Normal Jacobian entries, averaging M members divides the entry
variance by M. This script compares the closed-form moments of the squared
Frobenius norm with Monte Carlo estimates for several ensemble sizes.
"""

from fractions import Fraction

import numpy as np

from jens.theory import McConfig, analytic_bounds, random_simplex_fractions, simulate_bounds, sum_sq_weights

# %% Sum of squared weights never drops below 1/M
rng = np.random.default_rng(0)
for m in (2, 4, 8):
    c = random_simplex_fractions(rng, m)
    print(f"M={m}: sum c^2 = {float(sum_sq_weights(c)):.4f}  (floor {float(Fraction(1, m)):.4f})")

# %% Closed form against simulation
print(f"{'M':>3} {'E analytic':>11} {'E sampled':>11} {'Var analytic':>13} {'Var sampled':>12}")
for m in (1, 3, 6, 9):
    rec = simulate_bounds(McConfig(M=m, mu=0.1, sigma=0.5, samples=50_000))
    b = rec.bounds
    print(f"{m:>3} {b.E_exact:>11.4f} {rec.ensemble.mean:>11.4f} {b.Var_exact:>13.4f} {rec.ensemble.var:>12.4f}")

# %% Non-uniform weights sit between the single model and the uniform floor
b = analytic_bounds(McConfig(M=3, weights=(0.6, 0.3, 0.1)))
print(f"single {b.E_single:.3f} > weighted {b.E_exact:.3f} > uniform {b.E_lower:.3f}")
