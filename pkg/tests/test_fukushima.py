import math
import warnings

import numpy as np
import pytest

from dlab import (CauchyProblem, InvalidArgumentError, McConfig, NumericalError, SdeSpec, catalog,
                  euler_maruyama, gen_brownian, gen_fbm, make_grid, problem)
from dlab.fukushima import (chain_rule_check, condition16_check, default_battery, girsanov_eta,
                            girsanov_weight, ortho_formula, orthogonality_test, split)
from dlab.paths import PathEnsemble
from dlab.quasi_strong import build_sequence


def drifted(mu=0.5, n=1024, M=64, seed=11):
    grid = make_grid(0, 1, n)
    W = gen_brownian(grid, 1, M, seed)
    prob = problem("heat")
    f = lambda s, x: np.full(x.shape, mu)
    S = euler_maruyama(grid, SdeSpec(drift=f, diffusion=prob.sigma), [0.0], W)
    return grid, W, S, f, prob, catalog("heat_solution")


def test_split_heat_solution():
    grid, W, S, f, prob, bundle = drifted()
    dec = split(bundle, S, W, prob)
    Sv, Wv = S.values[..., 0], W.values[..., 0]
    mart = np.concatenate([np.zeros((S.M, 1)), np.cumsum(2 * Sv[:, :-1] * np.diff(Wv), axis=1)], axis=1)
    assert np.allclose(dec.mart_part.values[..., 0], mart)
    incr = Sv ** 2 + (1 - grid.times) - (Sv[:, :1] ** 2 + 1)
    assert np.allclose(dec.mart_part.values[..., 0] + dec.ortho_part.values[..., 0], incr)
    assert dec.closure_residual == 0.0
    assert dec.l21.shape == (S.M,)


def test_split_of_identity_is_W_plus_drift():
    grid, W, S, f, prob, _ = drifted(mu=0.7)
    ident = catalog("linear", coef=[1.0], const=0.0)
    dec = split(ident, S, W, prob)
    assert np.allclose(dec.mart_part.values, W.values - W.values[:, :1])
    assert np.allclose(dec.ortho_part.values[..., 0], 0.7 * grid.times, atol=1e-12)


def test_split_time_only_function():
    grid, W, S, f, prob, _ = drifted()
    tf = catalog("custom", f=lambda s, x: np.asarray(s) + 0 * x[..., 0],
                 dx_f=lambda s, x: np.zeros(x.shape), reg_class="C0")
    dec = split(tf, S, W, prob)
    assert np.all(dec.mart_part.values == 0)
    assert np.allclose(dec.ortho_part.values[..., 0], grid.times)


def test_split_warns_on_huge_gradient():
    grid, W, S, f, prob, _ = drifted(M=4)
    big = catalog("linear", coef=[1e5], const=0.0)
    with pytest.warns(RuntimeWarning):
        split(big, S, W, prob)


def test_ortho_formula_heat():
    grid, W, S, f, prob, bundle = drifted(mu=0.5)
    form = ortho_formula(bundle, prob, S, f)
    Sv = S.values[..., 0]
    expect = np.concatenate([np.zeros((S.M, 1)), np.cumsum(Sv[:, :-1] * grid.dt, axis=1)], axis=1)
    assert np.allclose(form.values[..., 0], expect)


def test_ortho_formula_forward_route_matches_bv_for_smooth_drift():
    grid, W, S, f, prob, bundle = drifted(mu=0.5)
    A = PathEnsemble(grid, 0.5 * np.broadcast_to(grid.times[:, None], S.values.shape).copy(), 0, "A")
    bv = ortho_formula(bundle, prob, S, f)
    fw = ortho_formula(bundle, prob, S, f, route="forward", A=A, eps=grid.dt)
    assert np.allclose(bv.values, fw.values, atol=1e-10)
    with pytest.raises(InvalidArgumentError):
        ortho_formula(bundle, prob, S, f, route="forward")
    with pytest.raises(InvalidArgumentError):
        ortho_formula(bundle, prob, S, f, route="nope")


def test_chain_rule_and_negative_control():
    grid, W, S, f, prob, bundle = drifted(n=2048, M=64)
    rep = chain_rule_check(bundle, prob, S, W, f, tol=0.05)
    assert rep.estimates[-1] <= 0.05 and rep.converged
    neg = chain_rule_check(bundle, prob, S, W, f, tol=0.05, h_shift=1.0)
    assert neg.estimates[-1] >= 10 * 0.05 and not neg.converged


def test_orthogonality_examples():
    grid, W, S, f, prob, bundle = drifted(n=2048, M=32)
    bv = PathEnsemble(grid, np.sin(np.broadcast_to(grid.times[:, None], (32, grid.n_steps + 1, 1))).copy())
    assert orthogonality_test(bv, W=W).passed
    fbm = gen_fbm(grid, 0.75, 32, 3)
    assert orthogonality_test(fbm, battery=[("W1", W)], threshold=0.1).passed
    neg = orthogonality_test(W, battery=[("W1", W)])
    assert not neg.passed and neg.per_martingale[0]["statistic"] == pytest.approx(1.0, abs=0.1)
    dec = split(bundle, S, W, prob)
    rep = orthogonality_test(dec.ortho_part, W=W)
    assert rep.passed and len(rep.per_martingale) == 3
    assert rep.to_dict()["pass"] is True


def test_default_battery_labels():
    grid = make_grid(0, 1, 16)
    labels = [l for l, _ in default_battery(gen_brownian(grid, 2, 2, 0))]
    assert labels == ["W1", "W1^2-t", "W2", "W2^2-t", "int sin(W1) dW1"]
    with pytest.raises(InvalidArgumentError):
        orthogonality_test(gen_brownian(grid, 1, 2, 0))


def test_girsanov_trivial_when_drifts_agree():
    grid, W, S, f, prob, bundle = drifted(mu=0.0, M=256)
    rep = girsanov_weight(S, W, prob, f, bundle=bundle)
    assert rep.z_terminal_mean.value == pytest.approx(1.0, abs=1e-12)
    assert rep.eta_max == 0.0 and rep.routes_agree and rep.passed


def test_girsanov_constant_drift_weight():
    grid, W, S, f, prob, bundle = drifted(mu=0.5, n=256, M=4096, seed=5)
    rep = girsanov_weight(S, W, prob, f, bundle=bundle)
    WT = W.values[:, -1, 0]
    assert rep.z_terminal_mean.value == pytest.approx(np.mean(np.exp(-0.5 * WT - 0.125)), rel=1e-10)
    assert rep.novikov_exponent_mean == pytest.approx(math.exp(0.125))
    assert rep.passed and rep.routes_agree
    assert rep.reweighted_check <= 3 * rep.reweighted_stderr + 0.02


def test_girsanov_singular_sigma():
    p = CauchyProblem(sigma=lambda s, x: np.where(x[..., :1] > 0, 1.0, 0.0)[..., None],
                      b=lambda s, x: 0.0, h=lambda s, x: 0.0, g=lambda x: 0.0)
    with pytest.raises(NumericalError, match="singular"):
        girsanov_eta(p, np.array([0.0, 0.5]), np.array([[1.0], [-1.0]]), np.zeros((2, 1)))


def test_girsanov_needs_ensemble():
    grid, W, S, f, prob, _ = drifted(M=1)
    with pytest.raises(InvalidArgumentError):
        girsanov_weight(S, W, prob, f)


def _grad_seq():
    prob = problem("abs_source")
    return prob, build_sequence(prob, [2, 4, 8], [[-2, 2]], (np.linspace(0, 1, 5), np.linspace(-2, 2, 9)),
                                McConfig(M=400, n_steps=32, seed=1), gradients=True)


def test_condition16():
    prob, seq = _grad_seq()
    grid = make_grid(0, 1, 128)
    W = gen_brownian(grid, 1, 16, 2)
    f = lambda s, x: np.full(x.shape, 0.5)
    S = euler_maruyama(grid, SdeSpec(drift=f, diffusion=prob.sigma), [0.0], W)
    rep = condition16_check(seq, S, f, prob.b)
    assert rep.estimates[-1] < rep.estimates[0]
    same = condition16_check(seq, S, prob.b, prob.b)
    assert np.all(np.asarray(same.estimates) == 0)
    seq.grad_n = [seq.grad_ref] * 3
    assert np.all(np.asarray(condition16_check(seq, S, f, prob.b).estimates) == 0)
    seq.grad_n = None
    with pytest.raises(InvalidArgumentError):
        condition16_check(seq, S, f, prob.b)
