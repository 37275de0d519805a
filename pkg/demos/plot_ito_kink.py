"""
An Ito formula for a function with a kink in time
=================================================

``f(s, x) = |s - 1/2| x^2`` is not differentiable in time at ``s = 1/2``.
Its time derivative is still integrable, and the eps-version of the Ito
formula closes up as eps shrinks.
"""
import numpy as np

from dlab import DEFAULT_SCHEDULE, catalog, check_c02ac, gen_brownian, ito_residual, ito_terms, make_grid

grid = make_grid(0.0, 1.0, 4096)
W = gen_brownian(grid, dim=1, M=256, seed=7)
f = catalog("kink_time_quadratic", c=0.5)

##############################################################################
# The regularity checks pass: the time derivative has one jump at s = 1/2,
# is integrable, and the second space derivative 2|s - 1/2| has no time jumps.
reg = check_c02ac(f, grid, K=[[-3.0, 3.0]])
print("regularity verdicts:", reg.verdict)
print("L1 bound of the time derivative:", round(reg.l1_time_bound, 4))
print("second-derivative time jumps:", reg.time_jump_sites)

##############################################################################
# Term-by-term breakdown on one path at eps = 4 dt.
parts = ito_terms(f, W[0], 4 * grid.dt)
print("sup residual on path 0:", float(np.max(np.abs(parts.residual))))

##############################################################################
# Mean sup-residual along the ladder.
rep = ito_residual(f, W, DEFAULT_SCHEDULE)
print("mean sup residual by eps:", np.round(np.asarray(rep.estimates, dtype=float), 4))
