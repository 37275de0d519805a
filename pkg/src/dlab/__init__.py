"""Numerical laboratory for forward integrals, Ito formulas for C^{0,2}_ac
functions, mild solutions of backward Cauchy problems and Fukushima-Dirichlet
decompositions."""
from .errors import (BlowUpError, DlabError, InvalidArgumentError, NumericalError,
                     UnsupportedOperationError)
from .functions import FunctionBundle, RegularityReport, catalog, check_c02ac, modulus
from .fukushima import (Decomposition, GirsanovReport, OrthoReport, chain_rule_check, condition16_check,
                        default_battery, girsanov_weight, ortho_formula, orthogonality_test, split)
from .ito import ItoBreakdown, fukushima_ac_identity, ito_residual, ito_terms
from .paths import (PathEnsemble, SamplePath, SdeSpec, TimeGrid, euler_maruyama, first_variation,
                    gen_brownian, gen_fbm, make_grid, read_binary, read_csv, write_binary, write_csv)
from .pde import (CauchyProblem, Estimate, McConfig, apply_generator, exact_pairs, fd_gradient, mild_grad,
                  mild_solve, oracle_solution, polynomial_moment_check, problem, quasi_strict_residual)
from .quasi_strong import (ApproxSequence, ConvergenceReport, build_sequence, convergence_report, mollify,
                           mollify_grad, truncate)
from .regularization import (DEFAULT_SCHEDULE, BracketPath, EpsSchedule, LimitReport, bracket_eps,
                             forward_integral_eps, ito_integral, limit_estimate)

__version__ = "0.1.0"
