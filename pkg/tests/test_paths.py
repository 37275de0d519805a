import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlab import (BlowUpError, InvalidArgumentError, NumericalError, PathEnsemble, SamplePath, SdeSpec,
                  UnsupportedOperationError, euler_maruyama, first_variation, gen_brownian, gen_fbm,
                  make_grid, read_binary, read_csv, write_binary, write_csv)
from dlab.paths import fgn_autocovariance
from dlab.rng import standard_normals


def test_make_grid_examples():
    assert make_grid(0, 1, 4).times.tolist() == [0, 0.25, 0.5, 0.75, 1]
    g = make_grid(0.5, 1.5, 1000)
    assert g.dt == pytest.approx(0.001, abs=1e-15)
    assert g.times[-1] == 1.5
    with pytest.raises(InvalidArgumentError):
        make_grid(0, 1, 1)


@pytest.mark.parametrize("args", [(1, 0, 4), (0, 0, 4), (0, np.inf, 4), (np.nan, 1, 4), (0, 1, 2.5)])
def test_make_grid_rejects(args):
    with pytest.raises(InvalidArgumentError):
        make_grid(*args)


@given(t0=st.floats(-10, 10), length=st.floats(1e-3, 10), n=st.integers(2, 5000))
def test_grid_invariants(t0, length, n):
    g = make_grid(t0, t0 + length, n)
    assert g.dt * g.n_steps == pytest.approx(g.T - g.t0, rel=1e-12)
    assert len(g.times) == n + 1
    assert g.times[0] == g.t0 and g.times[-1] == g.T
    assert np.all(np.diff(g.times) > 0)


def test_multiple():
    g = make_grid(0, 1, 1024)
    assert g.multiple(4 * g.dt) == 4
    with pytest.raises(InvalidArgumentError):
        g.multiple(1.5 * g.dt)
    with pytest.raises(InvalidArgumentError):
        g.multiple(0.0)


def test_constant_extension():
    g = make_grid(0, 1, 8)
    p = SamplePath(g, np.arange(9.0) ** 2)
    assert p.at(2.0)[0] == p.values[-1, 0]
    assert p.at(-1.0)[0] == p.values[0, 0]
    assert p.at(0.0625)[0] == pytest.approx(0.5)


def test_sample_path_rejects_nonfinite():
    g = make_grid(0, 1, 2)
    with pytest.raises(NumericalError):
        SamplePath(g, [0.0, np.nan, 1.0])
    with pytest.raises(InvalidArgumentError):
        SamplePath(g, [0.0, 1.0])


def test_brownian_examples():
    g = make_grid(0, 1, 64)
    W = gen_brownian(g, 1, 10_000, seed=3)
    wT = W.values[:, -1, 0]
    assert abs(wT.mean()) <= 3 * math.sqrt(1 / 10_000)
    sq = wT ** 2
    assert abs(sq.mean() - 1) <= 3 * sq.std(ddof=1) / 100
    assert np.all(W.values[:, 0] == 0)
    W2 = gen_brownian(g, 1, 10_000, seed=3)
    assert np.array_equal(W.values, W2.values)


def test_brownian_increment_variance():
    g = make_grid(0, 1, 256)
    M, n = 200, 256
    W = gen_brownian(g, 2, M, seed=5)
    inc = np.diff(W.values, axis=1).reshape(-1, 2)
    ratio = inc.var(axis=0) / g.dt
    band = 5 / math.sqrt(M * n)
    assert np.all(np.abs(ratio - 1) <= band)


def test_brownian_prefix_and_workers_independent():
    g = make_grid(0, 1, 32)
    a = gen_brownian(g, 2, 50, seed=9)
    b = gen_brownian(g, 2, 20, seed=9)
    c = gen_brownian(g, 2, 50, seed=9, workers=3)
    assert np.array_equal(a.values[:20], b.values)
    assert np.array_equal(a.values, c.values)


def test_normals_depend_on_index_not_batch():
    z1 = standard_normals(1, [5, 6], (4,))
    z2 = standard_normals(1, [6], (4,))
    assert np.array_equal(z1[1], z2[0])


def test_fbm_half_matches_brownian_variance():
    g = make_grid(0, 1, 128)
    B = gen_fbm(g, 0.5, 4000, seed=1)
    v = B.values[:, -1, 0] ** 2
    assert abs(v.mean() - 1) <= 3 * v.std(ddof=1) / math.sqrt(4000)


@pytest.mark.parametrize("method", ["cholesky", "circulant"])
def test_fbm_covariance(method):
    H = 0.75
    g = make_grid(0, 1, 64)
    B = gen_fbm(g, H, 6000, seed=2, method=method).values[:, :, 0]
    for i, j in [(64, 64), (32, 64), (16, 48)]:
        s, r = g.times[i], g.times[j]
        cov = 0.5 * (s ** (2 * H) + r ** (2 * H) - abs(s - r) ** (2 * H))
        prod = B[:, i] * B[:, j]
        assert abs(prod.mean() - cov) <= 4 * prod.std(ddof=1) / math.sqrt(6000)


def test_fbm_rejects():
    g = make_grid(0, 1, 8)
    for H in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(InvalidArgumentError):
            gen_fbm(g, H, 2, seed=0)
    with pytest.raises(InvalidArgumentError):
        gen_fbm(make_grid(0, 1, 2 ** 14 + 1), 0.7, 1, seed=0)


def test_fgn_autocovariance_lag0():
    acf = fgn_autocovariance(0.75, 4)
    assert acf[0] == 1.0
    assert acf[1] == pytest.approx(0.5 * (2 ** 1.5 - 2))


def _unit(s, x):
    return np.ones((x.shape[0], 1, 1))


def test_em_identity_sde():
    g = make_grid(0, 1, 16)
    W = gen_brownian(g, 1, 5, seed=1)
    X = euler_maruyama(g, SdeSpec(drift=lambda s, x: 0.0, diffusion=_unit), [2.0], W)
    assert np.allclose(X.values, W.values + 2.0, atol=1e-14)


def test_em_zero_diffusion_is_explicit_euler():
    g = make_grid(0, 1, 100)
    W = gen_brownian(g, 1, 2, seed=1)
    X = euler_maruyama(g, SdeSpec(drift=lambda s, x: -x, diffusion=lambda s, x: 0.0), [1.0], W)
    ref = [1.0]
    for _ in range(100):
        ref.append(ref[-1] + (-ref[-1]) * g.dt)
    assert np.array_equal(X.values[0, :, 0], ref)
    assert X.values[0, -1, 0] == pytest.approx(math.exp(-1), abs=2 * g.dt)


def test_em_ou_mean():
    kappa, x0 = 1.0, 2.0
    g = make_grid(0, 1, 256)
    W = gen_brownian(g, 1, 20_000, seed=4)
    X = euler_maruyama(g, SdeSpec(drift=lambda s, x: -kappa * x, diffusion=_unit), [x0], W)
    xT = X.values[:, -1, 0]
    se = xT.std(ddof=1) / math.sqrt(len(xT))
    assert abs(xT.mean() - x0 * math.exp(-kappa)) <= 3 * se + 2 * g.dt


def test_em_history_drift_adapted():
    g = make_grid(0, 1, 10)
    seen = []

    def drift(s, x, hist):
        seen.append(hist.shape[1])
        assert not hist.flags.writeable
        return hist[:, 0]

    W = gen_brownian(g, 1, 3, seed=0)
    euler_maruyama(g, SdeSpec(drift=drift, diffusion=_unit, uses_history=True), [1.0], W)
    assert seen == list(range(1, 11))


def test_em_blowup():
    g = make_grid(0, 1, 50)
    W = gen_brownian(g, 1, 3, seed=0)
    with pytest.raises(BlowUpError) as exc, np.errstate(over="ignore", invalid="ignore"):
        euler_maruyama(g, SdeSpec(drift=lambda s, x: 1e200 * x ** 2, diffusion=_unit), [1.0], W)
    assert exc.value.step >= 1
    assert len(exc.value.paths) >= 1


def test_first_variation_examples():
    g = make_grid(0, 1, 200)
    W = gen_brownian(g, 1, 1, seed=8)[0]
    const = SdeSpec(drift=lambda s, x: 0.0, diffusion=_unit, drift_dx=lambda s, x: 0.0,
                    diffusion_dx=lambda s, x: 0.0)
    X = euler_maruyama(g, const, [0.3], W)
    Z = first_variation(g, const, X, W)
    assert np.all(Z.values == 1.0)
    ou = SdeSpec(drift=lambda s, x: -2.0 * x, diffusion=_unit, drift_dx=lambda s, x: -2.0,
                 diffusion_dx=lambda s, x: 0.0)
    Z = first_variation(g, ou, euler_maruyama(g, ou, [1.0], W), W)
    assert np.allclose(Z.values.reshape(-1), (1 - 2 * g.dt) ** np.arange(201))
    assert Z.values.reshape(-1)[-1] == pytest.approx(math.exp(-2), abs=0.01)


def test_first_variation_geometric():
    # dX = X dW is linear, so the Euler first variation is exactly X / x0
    g = make_grid(0, 1, 500)
    W = gen_brownian(g, 1, 1, seed=8)[0]
    geo = SdeSpec(drift=lambda s, x: 0.0, diffusion=lambda s, x: x[:, :, None],
                  drift_dx=lambda s, x: 0.0, diffusion_dx=lambda s, x: np.ones((x.shape[0], 1, 1, 1)))
    x0 = 1.7
    X = euler_maruyama(g, geo, [x0], W)
    Z = first_variation(g, geo, X, W)
    assert np.allclose(Z.values.reshape(-1), X.values.reshape(-1) / x0, rtol=1e-12)


def test_first_variation_needs_derivatives():
    g = make_grid(0, 1, 4)
    W = gen_brownian(g, 1, 1, seed=0)[0]
    sde = SdeSpec(drift=lambda s, x: 0.0, diffusion=_unit)
    with pytest.raises(UnsupportedOperationError):
        first_variation(g, sde, euler_maruyama(g, sde, [0.0], W), W)


def test_io_roundtrip(tmp_path):
    g = make_grid(0.25, 1.5, 7)
    E = gen_brownian(g, 2, 3, seed=-5)
    write_csv(E, tmp_path / "e.csv")
    back = read_csv(tmp_path / "e.csv", seed=-5)
    assert back.grid == g and np.array_equal(back.values, E.values)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "path_id,step,s,x_1,x_2"
    write_binary(E, tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"DLAB"
    back = read_binary(tmp_path / "e.bin")
    assert back.seed == -5 and back.grid == g and np.array_equal(back.values, E.values)


def test_binary_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(InvalidArgumentError):
        read_binary(tmp_path / "x.bin")


def test_ensemble_container():
    g = make_grid(0, 1, 4)
    E = PathEnsemble(g, np.zeros((3, 5)), seed=2, label="z")
    assert E.M == 3 and E.dim == 1 and len(E.paths) == 3
    assert isinstance(E[1], SamplePath)
    with pytest.raises(InvalidArgumentError):
        PathEnsemble(g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        E.values[0, 0, 0] = 1.0
