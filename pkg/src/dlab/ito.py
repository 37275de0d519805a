"""Numerical check of the Ito formula for C^{0,2}_ac functions of finite
quadratic variation processes, with the term-by-term breakdown.

For a path ``X`` and ``eps = k*dt`` the residual is

    f(s, X_s) - f(t, X_t) - int ds_f dr - I^-(eps, dx_f(., X), dX)
                          - 1/2 sum_ij int d2_ij f d[X^i, X^j]^eps

where the last Stieltjes integral runs against the eps-bracket path at the
same ``eps`` as the forward term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import cumulative_left
from .errors import InvalidArgumentError, UnsupportedOperationError
from .functions import FunctionBundle
from .paths import TimeGrid, same_grid, unwrap
from .regularization import (DEFAULT_SCHEDULE, EpsSchedule, LimitReport, bracket_sum, forward_sum,
                             ito_sum, limit_estimate, shifted_increment)

HYPOTHESES = ("count", "ac_brackets")


@dataclass
class ItoBreakdown:
    """Terms of the Ito formula along one path or an ensemble (leading axis)."""

    grid: TimeGrid
    eps: float
    lhs: np.ndarray
    time_term: np.ndarray
    forward_term: np.ndarray
    bracket_term: np.ndarray
    residual: np.ndarray
    hypothesis: str = "count"
    i_terms: dict = field(default_factory=dict)

    def sup_residual(self) -> np.ndarray:
        return np.max(np.abs(self.residual), axis=-1)


def _check_bundle(bundle, hypothesis):
    if bundle.reg_class not in ("C12", "C02ac", "C02ac_count"):
        raise InvalidArgumentError(f"Ito formula needs a C^(0,2)_ac bundle, got {bundle.reg_class}")
    if None in (bundle.ds_f, bundle.dx_f, bundle.dxx_f):
        raise UnsupportedOperationError("ito_terms needs ds_f, dx_f and dxx_f")
    if hypothesis not in HYPOTHESES:
        raise InvalidArgumentError(f"hypothesis must be one of {HYPOTHESES}")


def _terms(bundle, grid, Xv, k, diagnostics):
    times = grid.times
    dt = grid.dt
    f = bundle.value(times, Xv)
    lhs = f - f[..., :1]
    time_term = cumulative_left(bundle.time_derivative(times, Xv)[..., :-1] * dt)
    dxf = bundle.gradient(times, Xv)
    forward = forward_sum(dxf, Xv, k)
    hess = bundle.hessian(times, Xv)
    dB = np.diff(bracket_sum(Xv, Xv, k), axis=-3)
    bracket = cumulative_left(0.5 * np.einsum("...ij,...ij->...", hess[..., :-1, :, :], dB))
    residual = lhs - time_term - forward - bracket
    extra = {}
    if diagnostics:
        n = grid.n_steps
        idx = np.minimum(np.arange(n + 1) + k, n)
        t_shift = times[idx]
        X_shift = np.take(Xv, idx, axis=-2)
        f_ss = bundle.value(t_shift, X_shift)
        extra["I0"] = cumulative_left(((f_ss - f) / k)[..., :-1])
        extra["I1"] = cumulative_left(((f_ss - bundle.value(times, X_shift)) / k)[..., :-1])
        extra["I2"] = forward
        extra["I3"] = bracket
        inc = shifted_increment(Xv, k)
        # midpoint rule in the interpolation variable
        hmid = bundle.hessian(times, Xv + 0.5 * inc) - hess
        quad = np.einsum("...ij,...i,...j->...", hmid, inc, inc)
        extra["I4"] = cumulative_left((0.5 * quad / k)[..., :-1])
    return lhs, time_term, forward, bracket, residual, extra


def ito_terms(bundle: FunctionBundle, X, eps: float, hypothesis: str = "count",
              diagnostics: bool = False) -> ItoBreakdown:
    """Assemble every term of the Ito formula at one regularization level.

    Parameters
    ----------
    bundle : FunctionBundle
        Class C12, C02ac or C02ac_count with all derivatives.
    X : SamplePath or PathEnsemble
    eps : float
        Multiple of the grid step.
    hypothesis : {"count", "ac_brackets"}
        Which alternative hypothesis the caller asserts (countable time
        discontinuities of the second derivatives, or absolutely continuous
        brackets).  Recorded, not checked.
    diagnostics : bool
        Also return the I0..I4 decomposition terms (I4 by a one-point
        midpoint rule).
    """
    _check_bundle(bundle, hypothesis)
    grid, Xv = unwrap(X)
    k = grid.multiple(eps)
    lhs, tt, fw, br, res, extra = _terms(bundle, grid, Xv, k, diagnostics)
    return ItoBreakdown(grid=grid, eps=float(eps), lhs=lhs, time_term=tt, forward_term=fw,
                        bracket_term=br, residual=res, hypothesis=hypothesis, i_terms=extra)


def ito_residual(bundle: FunctionBundle, ensemble, schedule: EpsSchedule = DEFAULT_SCHEDULE,
                 tol: float = 0.05, hypothesis: str = "count") -> LimitReport:
    """Mean over paths of ``sup_s |residual(s)|`` along the eps ladder."""
    _check_bundle(bundle, hypothesis)
    grid, Xv = unwrap(ensemble)
    if Xv.ndim == 2:
        Xv = Xv[None]

    def estimator(eps):
        *_, res, _ = _terms(bundle, grid, Xv, grid.multiple(eps), False)
        return np.max(np.abs(res), axis=-1)

    rep = limit_estimate(estimator, schedule, grid.dt, tol, ensemble=True, target=0.0)
    rep.notes["hypothesis"] = hypothesis
    return rep


def fukushima_ac_identity(bundle: FunctionBundle, M_part, A_part,
                          schedule: EpsSchedule = DEFAULT_SCHEDULE, tol: float = 0.05,
                          X=None) -> LimitReport:
    """Compare two expressions of the martingale-orthogonal part of ``f(s, X_s)``.

    ``X = M + A`` with ``M`` the martingale part.  Left side: ``f(s, X_s) -
    f(t, X_t) - int dx_f dM`` (left-point Ito sums).  Right side: ``int ds_f
    dr + 1/2 int d2f d[M, M]^eps + I^-(eps, dx_f, dA)``.  The statistic is
    the ensemble mean of their sup-distance at each eps.
    """
    _check_bundle(bundle, "count")
    grid = same_grid(M_part, A_part)
    _, Mv = unwrap(M_part)
    _, Av = unwrap(A_part)
    if Mv.shape != Av.shape:
        raise InvalidArgumentError("M and A must have the same shape")
    Xv = Mv + Av
    if X is not None:
        _, Xg = unwrap(X)
        if X.grid != grid or Xg.shape != Xv.shape or \
                np.max(np.abs(Xg - Xv)) > 1e-9 * (1.0 + np.max(np.abs(Xg))):
            raise InvalidArgumentError("decomposition mismatch: M + A differs from X")
        Xv = Xg
    if Xv.ndim == 2:
        Mv, Av, Xv = Mv[None], Av[None], Xv[None]
    times, dt = grid.times, grid.dt
    f = bundle.value(times, Xv)
    dxf = bundle.gradient(times, Xv)
    left = f - f[..., :1] - ito_sum(dxf, Mv)
    time_term = cumulative_left(bundle.time_derivative(times, Xv)[..., :-1] * dt)
    hess = bundle.hessian(times, Xv)[..., :-1, :, :]

    def estimator(eps):
        k = grid.multiple(eps)
        dB = np.diff(bracket_sum(Mv, Mv, k), axis=-3)
        right = time_term + cumulative_left(0.5 * np.einsum("...ij,...ij->...", hess, dB)) \
            + forward_sum(dxf, Av, k)
        return np.max(np.abs(left - right), axis=-1)

    return limit_estimate(estimator, schedule, dt, tol, ensemble=True, target=0.0)
