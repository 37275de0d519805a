"""
Brackets of Brownian and fractional Brownian paths
==================================================

The eps-bracket ``[X, X]^eps(t)`` averages squared increments over a window
of length eps.  For Brownian motion it tends to ``t``; for fractional
Brownian motion with Hurst index above one half it tends to zero.
"""
import numpy as np

from dlab import DEFAULT_SCHEDULE, bracket_eps, gen_brownian, gen_fbm, limit_estimate, make_grid

##############################################################################
# A grid on [0, 1] and 256 Brownian paths.
grid = make_grid(0.0, 1.0, 4096)
W = gen_brownian(grid, dim=1, M=256, seed=2024)

##############################################################################
# Terminal bracket of each path along the eps ladder {64, 32, 16, 8, 4} dt.
rep = limit_estimate(lambda eps: bracket_eps(W, W, eps).values[:, -1, 0, 0],
                     DEFAULT_SCHEDULE, grid.dt, ensemble=True, target=1.0)
for eps, est in zip(rep.eps, rep.estimates):
    print(f"eps = {eps:.5f}   [W, W](1) ~ {float(est):.4f}")
print("converged to 1:", rep.converged)

##############################################################################
# The same ladder for fBm with H = 0.75 on a finer grid: the bracket
# shrinks roughly like eps ** (2H - 1).
fine = make_grid(0.0, 1.0, 2 ** 14)
B = gen_fbm(fine, hurst=0.75, M=64, seed=2024)
rep = limit_estimate(lambda eps: bracket_eps(B, B, eps).values[:, -1, 0, 0],
                     DEFAULT_SCHEDULE, fine.dt, ensemble=True, target=0.0)
print("fBm estimates:", np.round(np.asarray(rep.estimates, dtype=float), 4))
