"""Fukushima-Dirichlet decomposition of ``u(s, S_s)``.

``S`` solves ``dS = f(s, S) ds + sigma(s, S) dW`` with a drift ``f`` that
may differ from the drift ``b`` of the Cauchy problem solved by ``u``.
Then ``u(s, S_s) = u(t, S_t) + int dx_u sigma dW + B_s`` where the
martingale-orthogonal part is

    B_s = int h dr + int dx_u (f - b) dr.

This module computes ``B`` as a difference (``split``) and by that formula
(``ortho_formula``), tests orthogonality against a finite battery of
martingales and provides the change of measure that turns ``f`` into ``b``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ._util import coerce, cumulative_left
from .errors import InvalidArgumentError, NumericalError
from .functions import FunctionBundle
from .paths import PathEnsemble, SamplePath, SdeSpec, euler_maruyama, rewrap, same_grid, unwrap
from .pde import CauchyProblem, Estimate, _estimate
from .quasi_strong import ApproxSequence
from .regularization import (DEFAULT_SCHEDULE, EpsSchedule, LimitReport, bracket_sum, forward_sum,
                             ito_sum, summarize_ladder)

CHAIN_SCHEDULE = EpsSchedule((16, 8, 4, 2, 1))
L21_WARN = 1e8


def _eval_field(fn, times, Sv, tail):
    """Evaluate a batch callback ``fn(s, x)`` on every (time, path) node."""
    lead = Sv.shape[:-1]
    d = Sv.shape[-1]
    xf = Sv.reshape(-1, d)
    sf = np.broadcast_to(times, lead).reshape(-1)
    return coerce(fn(sf, xf), (len(xf),), tail).reshape(lead + tail)


def _drift_values(drift_f, grid, Sv, d):
    """Drift along the paths; ``drift_f`` is a batch callback or an SdeSpec."""
    if isinstance(drift_f, SdeSpec):
        if not drift_f.uses_history:
            return _eval_field(drift_f.drift, grid.times, Sv, (d,))
        single = Sv.ndim == 2
        V = Sv[None] if single else Sv
        out = np.empty(V.shape[:-1] + (d,))
        for k, t in enumerate(grid.times):
            hist = V[:, : k + 1]
            out[:, k] = drift_f.eval_drift(t, V[:, k], hist)
        return out[0] if single else out
    return _eval_field(drift_f, grid.times, Sv, (d,))


def _sigma_values(sigma, times, Sv, d, m=None):
    if isinstance(sigma, CauchyProblem):
        return sigma.eval_sigma(np.broadcast_to(times, Sv.shape[:-1]), Sv)
    if m is None:
        probe = np.asarray(sigma(times[:1], Sv.reshape(-1, d)[:1]))
        m = 1 if probe.ndim < 3 else probe.shape[-1]
    return _eval_field(sigma, times, Sv, (d, m))


@dataclass
class Decomposition:
    """``u(s,S_s) - u(t,S_t) = mart_part + ortho_part`` along paths."""

    mart_part: object
    ortho_part: object
    closure_residual: float
    l21: np.ndarray = None
    notes: dict = field(default_factory=dict)


def split(bundle: FunctionBundle, S, W, sigma) -> Decomposition:
    """Martingale part by left-point Ito sums, orthogonal part as the remainder.

    ``sigma`` is a batch callback ``(s, x) -> (B, d, m)`` or a CauchyProblem.
    The pathwise integral ``int |dx_u(s, S_s)|^2 ds`` is reported as ``l21``;
    a warning is issued when it is not finite or exceeds ``1e8``.
    """
    if bundle.dx_f is None:
        raise InvalidArgumentError("split needs dx_f")
    grid = same_grid(S, W)
    _, Sv = unwrap(S)
    _, Wv = unwrap(W)
    times = grid.times
    d, m = Sv.shape[-1], Wv.shape[-1]
    u = bundle.value(times, Sv)
    du = bundle.gradient(times, Sv)
    sig = _sigma_values(sigma, times, Sv, d, m)
    integrand = np.einsum("...i,...ij->...j", du, sig)
    mart = ito_sum(integrand, Wv)
    incr = u - u[..., :1]
    ortho = incr - mart
    closure = float(np.max(np.abs(incr - mart - ortho)))
    l21 = np.sum(np.sum(du * du, axis=-1)[..., :-1], axis=-1) * grid.dt
    if not np.all(np.isfinite(l21)) or np.any(l21 > L21_WARN):
        warnings.warn("square integrability of dx_u along S looks violated", RuntimeWarning)
    return Decomposition(mart_part=rewrap(S, grid, mart[..., None], "mart_part"),
                         ortho_part=rewrap(S, grid, ortho[..., None], "ortho_part"),
                         closure_residual=closure, l21=l21)


def ortho_formula(bundle: FunctionBundle, prob: CauchyProblem, S, drift_f, route: str = "bv",
                  A=None, eps: Optional[float] = None, h_shift: float = 0.0):
    """Orthogonal part from the coefficients: ``int h + int dx_u f - int dx_u b``.

    ``route="bv"`` uses left-point Lebesgue quadrature of the middle term.
    ``route="forward"`` replaces it by the eps-forward integral of ``dx_u``
    against the caller's drift path ``A`` (any process, not only bounded
    variation).  ``h_shift`` adds a constant to ``h`` (negative controls).
    """
    if bundle.dx_f is None:
        raise InvalidArgumentError("ortho_formula needs dx_f")
    grid, Sv = unwrap(S)
    times, dt = grid.times, grid.dt
    d = Sv.shape[-1]
    du = bundle.gradient(times, Sv)
    h = prob.eval_h(np.broadcast_to(times, Sv.shape[:-1]), Sv) + h_shift
    b = prob.eval_b(np.broadcast_to(times, Sv.shape[:-1]), Sv)
    rate = h - np.sum(du * b, axis=-1)
    if route == "bv":
        f = _drift_values(drift_f, grid, Sv, d)
        out = cumulative_left((rate + np.sum(du * f, axis=-1))[..., :-1] * dt)
    elif route == "forward":
        if A is None or eps is None:
            raise InvalidArgumentError("the forward route needs the drift path A and eps")
        gA, Av = unwrap(A)
        if gA != grid or Av.shape != Sv.shape:
            raise InvalidArgumentError("A must live on the grid of S with the same shape")
        out = cumulative_left(rate[..., :-1] * dt) + forward_sum(du, Av, grid.multiple(eps))
    else:
        raise InvalidArgumentError("route must be 'bv' or 'forward'")
    return rewrap(S, grid, out[..., None], "ortho_formula")


def _coarse(obj, c):
    grid, v = unwrap(obj)
    return rewrap(obj, grid.coarsen(c), v[..., ::c, :])


def chain_rule_check(bundle: FunctionBundle, prob: CauchyProblem, S, W, drift_f,
                     schedule: EpsSchedule = CHAIN_SCHEDULE, tol: float = 0.05,
                     h_shift: float = 0.0) -> LimitReport:
    """Residual of ``u(s,S_s) = u(t,S_t) + int dx_u sigma dW + B_s`` under grid refinement.

    Each schedule entry ``c`` subsamples the paths to every ``c``-th grid
    point; the ladder parameter reported as ``eps`` is the coarse step.
    Statistic: ensemble mean of ``sup_s |residual(s)|`` (target 0).
    """
    grid = same_grid(S, W)
    raw = []
    for c in schedule:
        Sc, Wc = _coarse(S, c), _coarse(W, c)
        dec = split(bundle, Sc, Wc, prob)
        _, ortho = unwrap(dec.ortho_part)
        _, formula = unwrap(ortho_formula(bundle, prob, Sc, drift_f, h_shift=h_shift))
        res = np.max(np.abs(ortho - formula)[..., 0], axis=-1)
        raw.append(np.atleast_1d(res))
    rep = summarize_ladder(schedule.eps(grid.dt), raw, tol, ensemble=True, target=0.0)
    rep.notes["ladder"] = "grid coarsening factors"
    if h_shift:
        rep.notes["h_shift"] = float(h_shift)
    return rep


# ------------------------------------------------------------------ orthogonality

def default_battery(W):
    """Test martingales: each component of W, ``W_i^2 - t`` and ``int sin(W_1) dW_1``."""
    grid, Wv = unwrap(W)
    t = grid.times[:, None] - grid.t0
    out = []
    for i in range(Wv.shape[-1]):
        out.append((f"W{i + 1}", rewrap(W, grid, Wv[..., i:i + 1])))
        out.append((f"W{i + 1}^2-t", rewrap(W, grid, Wv[..., i:i + 1] ** 2 - t)))
    w1 = Wv[..., :1]
    out.append(("int sin(W1) dW1", rewrap(W, grid, ito_sum(np.sin(w1), w1)[..., None])))
    return out


@dataclass
class OrthoReport:
    per_martingale: list
    threshold: float
    passed: bool

    def to_dict(self) -> dict:
        return {"per_martingale": self.per_martingale, "threshold": self.threshold, "pass": self.passed}


def orthogonality_test(A, battery: Optional[Sequence] = None,
                       schedule: EpsSchedule = DEFAULT_SCHEDULE, threshold: float = 0.05,
                       W=None) -> OrthoReport:
    """Finite-battery proxy for ``[N, A] = 0`` for all continuous local martingales.

    For each battery entry ``(label, N)`` the statistic at each eps is the
    ensemble mean of ``max_s |[A, N]^eps(s)|``.  An entry passes when the
    value at the smallest eps is at most ``threshold`` and no larger than at
    the largest eps.  Without an explicit battery, :func:`default_battery`
    of ``W`` is used.
    """
    if battery is None:
        if W is None:
            raise InvalidArgumentError("give a battery or the Brownian motion W")
        battery = default_battery(W)
    battery = list(battery)
    if not battery:
        raise InvalidArgumentError("battery must be nonempty")
    grid, Av = unwrap(A)
    entries, ok_all = [], True
    for label, N in battery:
        same_grid(A, N)
        _, Nv = unwrap(N)
        stats = []
        for k in schedule:
            br = bracket_sum(Av, Nv, k)
            per_path = np.max(np.abs(br).reshape(br.shape[:-3] + (-1,)), axis=-1) if br.ndim > 3 \
                else np.max(np.abs(br))
            stats.append(float(np.mean(per_path)))
        decays = stats[-1] <= stats[0] + 1e-15
        ok = stats[-1] <= threshold and decays
        ok_all &= ok
        entries.append({"label": label, "statistic": stats[-1], "by_eps": stats,
                        "decays": bool(decays), "pass": bool(ok)})
    return OrthoReport(per_martingale=entries, threshold=float(threshold), passed=bool(ok_all))


# ------------------------------------------------------------------ Girsanov

@dataclass
class GirsanovReport:
    z_terminal_mean: Estimate
    novikov_exponent_mean: float
    eta_max: float
    reweighted_check: float
    reweighted_stderr: float = float("nan")
    direct_route: Optional[Estimate] = None
    girsanov_route: Optional[Estimate] = None
    routes_agree: Optional[bool] = None
    passed: bool = False

    def to_dict(self) -> dict:
        out = {"z_terminal_mean": self.z_terminal_mean.to_dict(),
               "novikov_exponent_mean": self.novikov_exponent_mean, "eta_max": self.eta_max,
               "reweighted_check": self.reweighted_check, "reweighted_stderr": self.reweighted_stderr,
               "pass": self.passed}
        if self.direct_route is not None:
            out.update(direct_route=self.direct_route.to_dict(),
                       girsanov_route=self.girsanov_route.to_dict(), routes_agree=self.routes_agree)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in out.items()}


def girsanov_eta(prob: CauchyProblem, times, Sv, f):
    """``eta = sigma^+ (b - f)`` with the right pseudo-inverse ``sigma^T (sigma sigma^T)^-1``."""
    lead = Sv.shape[:-1]
    tt = np.broadcast_to(times, lead)
    sig = prob.eval_sigma(tt, Sv)
    a = sig @ np.swapaxes(sig, -1, -2)
    cond = np.linalg.cond(a.reshape(-1, prob.d, prob.d)).reshape(lead)
    bad = ~np.isfinite(cond) | (cond > 1e12)
    if bad.any():
        loc = np.unravel_index(int(np.argmax(bad)), lead)
        raise NumericalError(f"sigma sigma^T is singular at node {tuple(int(i) for i in loc)} "
                             f"(s={float(tt[loc]):.6g}, x={Sv[loc].tolist()})")
    y = np.linalg.solve(a, (prob.eval_b(tt, Sv) - f)[..., None])[..., 0]
    return np.einsum("...ij,...i->...j", sig, y)


def girsanov_weight(S, W, prob: CauchyProblem, drift_f, bundle: Optional[FunctionBundle] = None,
                    x0=None, route_tol: float = 0.05) -> GirsanovReport:
    """Change of measure removing the extra drift of ``S``.

    ``log Z_T = sum eta . dW - 1/2 sum |eta|^2 dt`` (left points).  With a
    solution ``bundle`` the report also compares two estimates of
    ``E^Q[u(T, X_T) - u(t, x)]``: directly, by simulating the problem's SDE
    on the same noise, and by reweighting the increments of ``u`` along
    ``S`` with ``Z_T``.  ``reweighted_check`` is ``E[Z_T (u(T,S_T) -
    u(t,S_t) - int h dr)]``, which vanishes when ``S`` under ``Q`` has the
    problem's law.  The routes agree when their difference is within three
    combined standard errors plus ``route_tol``.
    """
    grid = same_grid(S, W)
    if not isinstance(S, PathEnsemble) or S.M < 2:
        raise InvalidArgumentError("girsanov_weight needs an ensemble of at least two paths")
    _, Sv = unwrap(S)
    _, Wv = unwrap(W)
    times, dt = grid.times, grid.dt
    f = _drift_values(drift_f, grid, Sv, prob.d)
    eta = girsanov_eta(prob, times, Sv, f)
    sq = np.sum(eta * eta, axis=-1)[..., :-1]
    logZ = np.sum(np.sum(eta[..., :-1, :] * np.diff(Wv, axis=-2), axis=-1), axis=-1) - 0.5 * np.sum(sq, axis=-1) * dt
    Z = np.exp(logZ)
    z_est = _estimate(Z, S.M)
    novikov = float(np.mean(np.exp(0.5 * np.sum(sq, axis=-1) * dt)))
    rep = GirsanovReport(z_terminal_mean=z_est, novikov_exponent_mean=novikov,
                         eta_max=float(np.max(np.abs(eta))), reweighted_check=float("nan"))
    rep.passed = bool(np.isfinite(novikov) and abs(z_est.value - 1.0) <= 3.0 * z_est.stderr)
    if bundle is not None:
        u = bundle.value(times, Sv)
        incr = u[:, -1] - u[:, 0]
        hint = np.sum(prob.eval_h(np.broadcast_to(times, Sv.shape[:-1]), Sv)[:, :-1], axis=-1) * dt
        w = Z * (incr - hint)
        rep.reweighted_check = float(abs(w.mean()))
        rep.reweighted_stderr = float(w.std(ddof=1) / math.sqrt(S.M))
        start = Sv[:, 0] if x0 is None else x0
        X = euler_maruyama(grid, prob.to_sde(), start, W)
        _, Xv = unwrap(X)
        uX = bundle.value(times[[0, -1]], Xv[:, [0, -1]])
        rep.direct_route = _estimate(uX[:, 1] - uX[:, 0], S.M)
        rep.girsanov_route = _estimate(Z * incr, S.M)
        comb = math.hypot(rep.direct_route.stderr, rep.girsanov_route.stderr)
        rep.routes_agree = bool(abs(rep.direct_route.value - rep.girsanov_route.value) <= 3.0 * comb + route_tol)
    return rep


# ------------------------------------------------------------------ condition (16)

def condition16_check(seq: ApproxSequence, S, drift_f, b: Callable, tol: float = 0.05) -> LimitReport:
    """``sup_s |int_t^s (dx_u_n - dx_u)(r, S_r) . (f - b)(r, S_r) dr|`` along the sequence.

    Gradient surfaces of ``seq`` are interpolated (linear in time and space,
    clamped to the evaluation box) at the path nodes; one-dimensional state
    only.  The ladder parameter is ``1/n``; the statistic is the ensemble
    mean of the per-path sup (target 0).
    """
    if seq.grad_n is None:
        raise InvalidArgumentError("the sequence carries no gradient surfaces")
    if seq.points.shape[1] != 1:
        raise InvalidArgumentError("condition16_check supports d = 1 only")
    grid, Sv = unwrap(S)
    if Sv.ndim == 2:
        Sv = Sv[None]
    times = grid.times
    xs = seq.points[:, 0]
    order = np.argsort(xs)
    tq = np.clip(np.broadcast_to(times, Sv.shape[:-1]), seq.times[0], seq.times[-1])
    xq = np.clip(Sv[..., 0], xs.min(), xs.max())
    query = np.stack([tq.ravel(), xq.ravel()], axis=-1)
    fb = _drift_values(drift_f, grid, Sv, 1)[..., 0] - \
        _eval_field(b, times, Sv, (1,))[..., 0]

    def interp(surface):
        return RegularGridInterpolator((seq.times, xs[order]), surface[:, order, 0])(query).reshape(tq.shape)

    ref = interp(seq.grad_ref)
    raw = []
    for G in seq.grad_n:
        diff = (interp(G) - ref) * fb
        raw.append(np.max(np.abs(cumulative_left(diff[..., :-1] * grid.dt)), axis=-1))
    rep = summarize_ladder([1.0 / n for n in seq.indices], raw, tol, ensemble=True, target=0.0)
    rep.notes["ladder"] = "1/n"
    return rep
