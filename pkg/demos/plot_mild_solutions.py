"""
Mild solutions by Feynman-Kac
=============================

``u(s, x) = E[g(X_T)] - E[int_s^T h(r, X_r) dr]`` with ``X`` started at
``x`` at time ``s``.  Closed forms are available for a few problems, and a
source ``h(x) = |x|`` shows the truncation and mollification ladder.
"""
import numpy as np

from dlab import McConfig, build_sequence, convergence_report, make_grid, mild_grad, mild_solve, \
    oracle_solution, problem

mc = McConfig(M=20_000, n_steps=256, seed=1)

##############################################################################
# Heat problem with g(x) = x^2: u(s, x) = x^2 + (T - s).
heat = problem("heat")
est = mild_solve(heat, 0.0, [0.5], mc)
print(f"heat: {est.value:.4f} +- {est.stderr:.4f}, exact {oracle_solution('heat_quadratic', None, 0.0, 0.5):.4f}")

##############################################################################
# Ornstein-Uhlenbeck drift: the gradient from the first variation process.
ou = problem("ou", kappa=1.0)
g = mild_grad(ou, 0.0, [2.0], mc)
print(f"OU gradient at (0, 2): {g.value[0]:.4f}, exact {np.exp(-1.0):.4f}")

##############################################################################
# Source |x|: smoothed sources h_n converge and so do the solutions u_n.
prob = problem("abs_source")
K = [[-2.0, 2.0]]
seq = build_sequence(prob, [2, 4, 8, 16], K, (np.array([0.0, 0.5]), np.linspace(-2, 2, 9)),
                     McConfig(M=2000, n_steps=128, seed=3))
rep = convergence_report(seq, prob.h, K, make_grid(0.0, 1.0, 256))
print("sup |u_n - u|:", np.round(rep.sup_u_err, 5))
print("L1 sup |h_n - h|:", np.round(rep.l1_h_err, 5))
