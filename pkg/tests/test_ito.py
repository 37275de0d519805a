import numpy as np
import pytest

from dlab import (EpsSchedule, InvalidArgumentError, PathEnsemble, SamplePath, UnsupportedOperationError,
                  catalog, fukushima_ac_identity, gen_brownian, gen_fbm, ito_residual, ito_terms, make_grid)
from dlab.functions import FunctionBundle


@pytest.fixture(scope="module")
def brownian():
    g = make_grid(0, 1, 4096)
    return g, gen_brownian(g, 1, 128, seed=21)


def test_linear_function(brownian):
    g, W = brownian
    br = ito_terms(catalog("linear"), W[0], 4 * g.dt)
    assert np.all(br.time_term == 0) and np.all(br.bracket_term == 0)
    w = W.values[0, :, 0]
    assert np.max(np.abs(br.lhs - (w - w[0]))) == 0
    # forward sum of a constant telescopes to a window average: residual is
    # w_s - mean(w over [s, s + eps]) + mean(w over [0, eps]), of size sqrt(eps)
    k = 4
    idx = np.minimum(np.arange(4097)[:, None] + np.arange(k), 4096)
    expected = w - w[idx].mean(axis=1) + w[:k].mean() - w[0]
    assert np.allclose(br.residual, expected, atol=1e-12)


def test_quadratic_function(brownian):
    g, W = brownian
    br = ito_terms(catalog("quadratic"), W[0], 4 * g.dt, diagnostics=True)
    assert br.residual[0] == 0
    assert np.max(np.abs(br.residual)) <= 0.15
    assert np.max(np.abs(br.bracket_term - 0.5 * 2 * g.times)) <= 0.1
    assert set(br.i_terms) == {"I0", "I1", "I2", "I3", "I4"}
    # f has no time dependence and constant Hessian: I1 and I4 vanish
    assert np.all(br.i_terms["I1"] == 0) and np.allclose(br.i_terms["I4"], 0)


def test_i_terms_add_up(brownian):
    # I0 = I1 + I2 + I3 + I4 up to the Taylor remainder of the midpoint rule
    g, W = brownian
    br = ito_terms(catalog("kink_time_quadratic"), W[0], 8 * g.dt, diagnostics=True)
    t = br.i_terms
    total = t["I1"] + t["I2"] + t["I3"] + t["I4"]
    assert np.max(np.abs(t["I0"] - total)) <= 0.05


def test_kink_residual_decays(brownian):
    g, W = brownian
    rep = ito_residual(catalog("kink_time_quadratic"), W, EpsSchedule(), 0.05)
    est = [float(v) for v in rep.estimates]
    assert est[-1] < est[0] and est[-1] <= 0.06


def test_quadratic_residual_scales_like_sqrt_eps(brownian):
    # the residual is an eps-window boundary term of size |dx_f| sqrt(eps);
    # at eps = 4 dt on 4096 steps it sits near 0.1, above a 0.05 target
    g, W = brownian
    rep = ito_residual(catalog("quadratic"), W, EpsSchedule(), 0.05)
    est = np.array([float(v) for v in rep.estimates])
    assert np.all(np.diff(est) < 0)
    slope = np.polyfit(np.log(rep.eps), np.log(est), 1)[0]
    assert 0.4 <= slope <= 0.6
    assert float(rep.limit) <= 0.12


def test_constant_function_zero_residual(brownian):
    g, W = brownian
    const = catalog("custom", f=lambda s, x: np.full(np.broadcast_shapes(np.shape(s), x.shape[:-1]), 2.0),
                    ds_f=lambda s, x: 0.0, dx_f=lambda s, x: 0.0, dxx_f=lambda s, x: 0.0)
    rep = ito_residual(const, W, EpsSchedule(), 0.05)
    assert all(float(v) == 0 for v in rep.estimates)


def test_heat_solution_on_fbm():
    g = make_grid(0, 1, 4096)
    B = gen_fbm(g, 0.75, 16, seed=3)
    b = catalog("heat_solution")
    br = ito_terms(b, B, 4 * g.dt)
    assert np.max(np.abs(br.bracket_term)) <= 0.06
    nobracket = br.lhs - br.time_term - br.forward_term
    assert np.mean(np.max(np.abs(nobracket), axis=-1)) <= 0.06
    big = ito_terms(b, B, 64 * g.dt)
    assert np.mean(np.abs(big.bracket_term[:, -1])) > np.mean(np.abs(br.bracket_term[:, -1]))


def test_errors(brownian):
    g, W = brownian
    b = catalog("quadratic")
    object.__setattr__(b, "dxx_f", None)
    with pytest.raises(UnsupportedOperationError):
        ito_terms(b, W[0], 4 * g.dt)
    weak = FunctionBundle(f=lambda s, x: x[..., 0], dx_f=lambda s, x: 1.0, reg_class="C01")
    with pytest.raises(InvalidArgumentError):
        ito_terms(weak, W[0], 4 * g.dt)
    with pytest.raises(InvalidArgumentError):
        ito_terms(catalog("quadratic"), W[0], 4 * g.dt, hypothesis="other")
    br = ito_terms(catalog("quadratic"), W[0], 4 * g.dt, hypothesis="ac_brackets")
    assert br.hypothesis == "ac_brackets"


def test_fukushima_identity_brownian(brownian):
    g, W = brownian
    zero = PathEnsemble(g, np.zeros_like(W.values))
    rep = fukushima_ac_identity(catalog("quadratic"), W, zero, EpsSchedule(), 0.05)
    assert float(rep.limit) <= 0.1 and rep.estimates[-1] < rep.estimates[0]


def test_fukushima_identity_bv_linear():
    g = make_grid(0, 1, 512)
    W = gen_brownian(g, 1, 1, seed=2)[0]
    A = SamplePath(g, g.times)
    rep = fukushima_ac_identity(catalog("linear"), W, A, EpsSchedule(), 0.05)
    # B = int d^-A = s both ways; only the last eps window of the forward sum differs
    assert float(rep.limit) <= 4 * g.dt + 1e-12


def test_fukushima_identity_fbm_drift():
    g = make_grid(0, 1, 4096)
    W = gen_brownian(g, 1, 32, seed=7)
    A = gen_fbm(g, 0.75, 32, seed=8)
    rep = fukushima_ac_identity(catalog("quadratic"), W, A, EpsSchedule(), 0.1)
    assert rep.estimates[-1] < rep.estimates[0]
    assert float(rep.limit) <= 0.15


def test_fukushima_identity_mismatch():
    g = make_grid(0, 1, 64)
    W = gen_brownian(g, 1, 1, seed=2)[0]
    A = SamplePath(g, g.times)
    X = SamplePath(g, W.values + 1.0)
    with pytest.raises(InvalidArgumentError):
        fukushima_ac_identity(catalog("linear"), W, A, EpsSchedule((8, 4, 2)), X=X)
