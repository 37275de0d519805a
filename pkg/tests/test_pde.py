import math

import numpy as np
import pytest

from dlab import (BlowUpError, CauchyProblem, InvalidArgumentError, McConfig, UnsupportedOperationError,
                  apply_generator, catalog, exact_pairs, fd_gradient, make_grid, mild_grad, mild_solve,
                  oracle_solution, polynomial_moment_check, problem, quasi_strict_residual)


def test_apply_generator_examples():
    heat = problem("heat")
    assert apply_generator(catalog("quadratic"), heat, 0.3, np.array([0.7])) == pytest.approx(1.0)
    ou = problem("ou", kappa=2.0)
    x = np.array([1.5])
    assert apply_generator(catalog("linear"), ou, 0.0, x) == pytest.approx(-3.0)
    hs = catalog("heat_solution")
    assert apply_generator(hs, heat, 0.2, x) == pytest.approx(1.0)
    assert hs.time_derivative(0.2, x) + apply_generator(hs, heat, 0.2, x) == pytest.approx(0.0)


def test_apply_generator_vectorized_2d():
    p = problem("heat", d=2)
    v = apply_generator(catalog("quadratic", d=2), p, np.zeros(4), np.ones((4, 2)))
    assert np.allclose(v, 2.0)


def test_apply_generator_missing():
    b = catalog("custom", f=lambda s, x: x[..., 0], reg_class="C0")
    with pytest.raises(UnsupportedOperationError):
        apply_generator(b, problem("heat"), 0.0, np.zeros(1))


@pytest.mark.parametrize("pair", range(4))
def test_quasi_strict_exact_pairs(pair):
    prob, bundle = exact_pairs()[pair]
    r = quasi_strict_residual(bundle, prob, np.array([[-1.3], [0.2], [2.0]]), make_grid(0, 1, 256))
    assert r <= 1e-4


def test_quasi_strict_ou_second_order():
    prob, bundle = problem("ou"), catalog("ou_solution")
    r1 = quasi_strict_residual(bundle, prob, np.array([1.0]), make_grid(0, 1, 64))
    r2 = quasi_strict_residual(bundle, prob, np.array([1.0]), make_grid(0, 1, 128))
    assert r2 == pytest.approx(r1 / 4, rel=0.05)


def test_quasi_strict_detects_wrong_sign():
    # with + int h the constant-source candidate -(T - s) is not a solution
    prob = problem("constant_source")
    wrong = catalog("custom", f=lambda s, x: (1 - np.asarray(s)) + np.zeros(x.shape[:-1]),
                    ds_f=lambda s, x: -np.ones(np.broadcast_shapes(np.shape(s), x.shape[:-1])),
                    dx_f=lambda s, x: np.zeros(x.shape), dxx_f=lambda s, x: np.zeros((1, 1)))
    assert quasi_strict_residual(wrong, prob, np.array([0.0]), make_grid(0, 1, 32)) == pytest.approx(2.0)


def test_nondegeneracy_spot_check():
    with pytest.raises(InvalidArgumentError):
        CauchyProblem(sigma=lambda s, x: 0.1, b=lambda s, x: 0.0, h=lambda s, x: 0.0,
                      g=lambda x: 0.0, nondegenerate=True, c=1.0)
    with pytest.raises(InvalidArgumentError):
        CauchyProblem(sigma=lambda s, x: np.nan, b=lambda s, x: 0.0, h=lambda s, x: 0.0, g=lambda x: 0.0)
    CauchyProblem(sigma=lambda s, x: 2.0, b=lambda s, x: 0.0, h=lambda s, x: 0.0, g=lambda x: 0.0,
                  nondegenerate=True, c=1.0)


def test_mcconfig_validation():
    with pytest.raises(InvalidArgumentError):
        McConfig(M=1)
    with pytest.raises(InvalidArgumentError):
        McConfig(M=11, antithetic=True)


MC = McConfig(M=20_000, n_steps=128, seed=7)


def test_mild_examples():
    e = mild_solve(problem("heat"), 0.0, [0.0], MC)
    assert abs(e.value - 1.0) <= 3 * e.stderr + 0.01
    e = mild_solve(problem("constant_source"), 0.25, [1.0], MC)
    assert e.value == pytest.approx(-0.75, abs=1e-12)
    e = mild_solve(problem("ou"), 0.0, [2.0], MC)
    assert abs(e.value - 2 * math.exp(-1)) <= 3 * e.stderr + 0.01


def test_mild_at_horizon_returns_g():
    e = mild_solve(problem("heat"), 1.0, [1.5], MC)
    assert e.value == 2.25 and e.stderr == 0.0


def test_oracles():
    assert oracle_solution("heat_quadratic", {"T": 1}, 0, 0.0) == 1.0
    assert oracle_solution("constant_source", {"T": 1}, 0.25, 3.0) == -0.75
    assert oracle_solution("ou_linear", {"kappa": 1, "T": 1}, 0, 2.0) == pytest.approx(2 * math.exp(-1))
    with pytest.raises(InvalidArgumentError):
        oracle_solution("nope")


@pytest.mark.parametrize("pair", range(4))
def test_quasi_strict_solutions_are_mild(pair):
    prob, bundle = exact_pairs()[pair]
    rng = np.random.default_rng(pair)
    mc = McConfig(M=4000, n_steps=128, seed=pair)
    for _ in range(2):
        s, x = rng.uniform(0, 0.9), rng.uniform(-1.5, 1.5)
        e = mild_solve(prob, s, [x], mc)
        assert abs(e.value - float(bundle.value(s, np.array([x])))) <= 3 * e.stderr + 0.02


def test_stderr_halves_when_paths_quadruple():
    p = problem("heat")
    a = mild_solve(p, 0.0, [0.5], McConfig(M=4000, n_steps=32, seed=1))
    b = mild_solve(p, 0.0, [0.5], McConfig(M=16000, n_steps=32, seed=1))
    assert b.stderr / a.stderr == pytest.approx(0.5, rel=0.2)


def test_antithetic():
    p = problem("ou")
    e = mild_solve(p, 0.0, [1.0], McConfig(M=2000, n_steps=64, seed=3, antithetic=True))
    # g is linear and the OU flow is affine in the noise: pairs cancel exactly
    assert e.stderr < 1e-12
    assert e.value == pytest.approx((1 - 1 / 64) ** 64, rel=1e-12)


def test_common_random_numbers_and_blocks():
    p = problem("heat")
    a = mild_solve(p, 0.1, [0.3], McConfig(M=3000, n_steps=32, seed=5, block=1000))
    b = mild_solve(p, 0.1, [0.3], McConfig(M=3000, n_steps=32, seed=5, block=4096, workers=2))
    assert a.value == b.value and a.stderr == b.stderr


def test_mild_grad_examples():
    e = mild_grad(problem("heat"), 0.3, [0.8], MC)
    assert abs(e.value[0] - 1.6) <= 3 * e.stderr[0] + 0.01
    e = mild_grad(problem("ou", kappa=1.0), 0.25, [0.8], MC)
    assert e.stderr[0] < 1e-12
    assert e.value[0] == pytest.approx(math.exp(-0.75), abs=0.01)


@pytest.mark.parametrize("name", ["heat", "ou", "constant_source", "abs_source"])
def test_mild_grad_matches_fd(name):
    p = problem(name)
    mc = McConfig(M=4000, n_steps=64, seed=2)
    g, fd = mild_grad(p, 0.2, [0.6], mc), fd_gradient(p, 0.2, [0.6], mc)
    assert abs(g.value[0] - fd.value[0]) <= 3 * math.hypot(g.stderr[0], fd.stderr[0]) + 0.01


def test_mild_grad_needs_derivatives():
    p = CauchyProblem(sigma=lambda s, x: 1.0, b=lambda s, x: 0.0, h=lambda s, x: 0.0, g=lambda x: x[:, 0])
    with pytest.raises(UnsupportedOperationError):
        mild_grad(p, 0.0, [0.0], MC)


def test_blowup_reported():
    p = CauchyProblem(sigma=lambda s, x: 1.0, b=lambda s, x: 1e3 * x ** 3, h=lambda s, x: 0.0,
                      g=lambda x: x[:, 0])
    with pytest.raises(BlowUpError), np.errstate(over="ignore", invalid="ignore"):
        mild_solve(p, 0.0, [3.0], McConfig(M=10, n_steps=64))


def test_polynomial_growth_of_mild_values():
    p = problem("heat")
    mc = McConfig(M=2000, n_steps=16, seed=1)
    vals = [mild_solve(p, 0.0, [r], mc).value for r in (1.0, 2.0, 4.0, 8.0)]
    slope = np.polyfit(np.log([1, 2, 4, 8]), np.log(vals), 1)[0]
    assert slope <= p.growth_degree + 0.1


def test_moment_check_examples():
    mc = McConfig(M=4000, n_steps=64, seed=3)
    rep = polynomial_moment_check(problem("heat"), 2, mc, radii=(0.0,))
    assert abs(rep.sup_moments[0] - 1.0) <= 3 * rep.stderr[0] + 0.01
    rep = polynomial_moment_check(problem("ou"), 2, mc)
    assert rep.passed and rep.slope <= 1.02
    still = CauchyProblem(sigma=lambda s, x: 0.0, b=lambda s, x: 0.0, h=lambda s, x: 0.0, g=lambda x: 0.0)
    rep = polynomial_moment_check(still, 3, McConfig(M=2, n_steps=4), radii=(0.5, 2.0))
    assert rep.sup_moments == [0.125, 8.0]
    with pytest.raises(InvalidArgumentError):
        polynomial_moment_check(still, 0, mc)


def test_problem_catalog_errors():
    with pytest.raises(InvalidArgumentError):
        problem("nope")
