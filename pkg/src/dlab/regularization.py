"""Regularized forward integrals, covariation brackets and eps -> 0 diagnostics.

For ``eps = k*dt`` the defining ``dr``-integrals are evaluated as
left-endpoint Riemann sums on the grid, reading ``X_{r+eps}`` through the
constant extension of ``X`` beyond ``T``.  All public functions accept a
SamplePath or a PathEnsemble and return the same kind of container.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._util import cumulative_left
from .errors import InvalidArgumentError, NumericalError
from .paths import PathEnsemble, SamplePath, TimeGrid, rewrap, same_grid, unwrap


@dataclass(frozen=True)
class EpsSchedule:
    """Decreasing regularization ladder ``eps = k * dt``."""

    eps_multiples: tuple = (64, 32, 16, 8, 4)

    def __post_init__(self):
        ks = tuple(int(k) for k in self.eps_multiples)
        if any(k != k0 for k, k0 in zip(ks, self.eps_multiples)):
            raise InvalidArgumentError("eps multiples must be integers")
        if len(ks) < 3:
            raise InvalidArgumentError("schedule needs at least 3 entries")
        if any(b >= a for a, b in zip(ks, ks[1:])):
            raise InvalidArgumentError("schedule must be strictly decreasing")
        if ks[-1] < 1:
            raise InvalidArgumentError("smallest multiple must be >= 1")
        object.__setattr__(self, "eps_multiples", ks)

    def eps(self, dt: float) -> np.ndarray:
        return np.asarray(self.eps_multiples, dtype=float) * dt

    def __iter__(self):
        return iter(self.eps_multiples)

    def __len__(self):
        return len(self.eps_multiples)


DEFAULT_SCHEDULE = EpsSchedule()


@dataclass(frozen=True)
class BracketPath:
    """Matrix-valued eps-bracket ``values[..., k, i, j] = [X^i, Y^j]^eps(s_k)``."""

    grid: TimeGrid
    values: np.ndarray

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.values, axis1=-2, axis2=-1)

    def at(self, s):
        lead = self.values.ndim - 3
        from .paths import _interp
        return _interp(self.grid, self.values, s, axis=lead)


def shifted_increment(values: np.ndarray, k: int) -> np.ndarray:
    """``X_{min(j+k, n)} - X_j`` along the time axis (second to last)."""
    n = values.shape[-2] - 1
    idx = np.minimum(np.arange(n + 1) + k, n)
    return np.take(values, idx, axis=-2) - values


def forward_sum(Yv: np.ndarray, Xv: np.ndarray, k: int) -> np.ndarray:
    """Array kernel of :func:`forward_integral_eps`; returns shape ``(..., n+1)``."""
    integrand = np.sum(Yv * shifted_increment(Xv, k), axis=-1) / k
    return cumulative_left(integrand[..., :-1])


def bracket_sum(Xv: np.ndarray, Yv: np.ndarray, k: int) -> np.ndarray:
    """Array kernel of :func:`bracket_eps`; returns shape ``(..., n+1, dX, dY)``."""
    ix = shifted_increment(Xv, k)
    iy = shifted_increment(Yv, k)
    prod = ix[..., :-1, :, None] * iy[..., :-1, None, :] / k
    out = np.zeros(prod.shape[:-3] + (prod.shape[-3] + 1,) + prod.shape[-2:])
    np.cumsum(prod, axis=-3, out=out[..., 1:, :, :])
    return out


def ito_sum(Yv: np.ndarray, Xv: np.ndarray) -> np.ndarray:
    """Left-point sums ``sum_{j<k} Y_j . (X_{j+1} - X_j)``; shape ``(..., n+1)``."""
    return cumulative_left(np.sum(Yv[..., :-1, :] * np.diff(Xv, axis=-2), axis=-1))


def _pair(Y, X):
    grid = same_grid(Y, X)
    _, Yv = unwrap(Y)
    _, Xv = unwrap(X)
    if Yv.shape[-1] != Xv.shape[-1]:
        raise InvalidArgumentError(f"dimension mismatch: {Yv.shape[-1]} vs {Xv.shape[-1]}")
    return grid, Yv, Xv


def forward_integral_eps(Y, X, eps: float):
    """Regularized forward integral ``I^-(eps, Y, dX)``.

    Computes ``int_t^s Y_r . (X_{r+eps} - X_r) / eps dr`` for every grid time
    ``s`` with a left-endpoint sum.  ``eps`` must be a positive multiple of
    the grid step.  Returns a scalar path starting at 0.
    """
    grid, Yv, Xv = _pair(Y, X)
    k = grid.multiple(eps)
    return rewrap(X, grid, forward_sum(Yv, Xv, k)[..., None], label="forward_integral")


def bracket_eps(X, Y, eps: float) -> BracketPath:
    """Regularized covariation matrix ``[X^i, Y^j]^eps`` on the grid.

    The result satisfies ``bracket_eps(X, Y) == bracket_eps(Y, X)`` transposed,
    and is symmetric when ``X`` and ``Y`` are the same process.
    """
    grid = same_grid(X, Y)
    k = grid.multiple(eps)
    _, Xv = unwrap(X)
    _, Yv = unwrap(Y)
    return BracketPath(grid, bracket_sum(Xv, Yv, k))


def ito_integral(Y, X):
    """Non-anticipating left-point sum, the semimartingale reference for ``int Y dX``."""
    grid, Yv, Xv = _pair(Y, X)
    return rewrap(X, grid, ito_sum(Yv, Xv)[..., None], label="ito_integral")


# ------------------------------------------------------------------ limits

@dataclass
class LimitReport:
    """Estimates across an eps ladder and the diagnosis of their limit.

    ``gaps[j]`` is the size of the change between ladder entries ``j`` and
    ``j+1`` (for ensembles: the median over paths of the per-path sup-norm
    change).  ``converged`` holds when the gaps shrink monotonically and the
    last one is at most ``tol``; for ladders with a known target (residuals
    tending to 0) it holds when the last estimate is within ``tol`` of the
    target and closer to it than the first.
    """

    eps: list
    estimates: list
    stderr: Optional[list]
    limit: object
    limit_stderr: object
    gaps: list
    spread: float
    last_gap: float
    monotone: bool
    converged: bool
    rate: float
    tol: float
    richardson: bool = False
    continuity: Optional[float] = None
    times: Optional[np.ndarray] = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            a = np.asarray(v, dtype=float)
            return float(a) if a.ndim == 0 else None
        out = {
            "limit": _jsonable(self.limit),
            "limit_stderr": _jsonable(self.limit_stderr),
            "rate": _jsonable(self.rate),
            "converged": bool(self.converged),
            "spread": float(self.spread),
            "last_gap": float(self.last_gap),
            "monotone": bool(self.monotone),
            "tol": float(self.tol),
            "eps": [float(e) for e in self.eps],
            "gaps": [float(g) for g in self.gaps],
            "richardson": self.richardson,
        }
        scalars = [conv(e) for e in self.estimates]
        if all(v is not None for v in scalars):
            out["estimates"] = scalars
        if self.continuity is not None:
            out["continuity"] = float(self.continuity)
        if self.notes:
            out["notes"] = {k: _jsonable(v) for k, v in self.notes.items()}
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        """Rows ``(eps, s, estimate, stderr)``; ``s`` is empty for scalar estimates."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "s", "estimate", "stderr"])
            for j, e in enumerate(self.eps):
                est = np.atleast_1d(np.asarray(self.estimates[j], dtype=float)).ravel()
                se = (np.atleast_1d(np.asarray(self.stderr[j], dtype=float)).ravel()
                      if self.stderr is not None else np.full(est.shape, np.nan))
                if self.times is not None and est.size == len(self.times):
                    for s, v, q in zip(self.times, est, se):
                        w.writerow([repr(float(e)), repr(float(s)), repr(float(v)), repr(float(q))])
                else:
                    for v, q in zip(est, se):
                        w.writerow([repr(float(e)), "", repr(float(v)), repr(float(q))])


def _jsonable(v):
    if v is None:
        return None
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        f = float(a)
        return f if math.isfinite(f) else None
    return [(_jsonable(x)) for x in a]


def _fit_rate(eps, gaps) -> float:
    e = np.asarray(eps[1:], dtype=float)
    g = np.asarray(gaps, dtype=float)
    ok = g > 0
    if ok.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(e[ok]), np.log(g[ok]), 1)
    return float(slope)


def limit_estimate(estimator: Callable[[float], object], schedule: EpsSchedule, dt: float,
                   tol: float = 0.02, *, ensemble: bool = False, richardson: bool = False,
                   times: Optional[Sequence[float]] = None,
                   target: Optional[float] = None) -> LimitReport:
    """Evaluate ``estimator(eps)`` along a schedule and diagnose the eps -> 0 limit.

    Parameters
    ----------
    estimator : callable
        Maps ``eps`` to an estimate: a scalar, an array (e.g. a path on the
        grid), or with ``ensemble=True`` an array whose first axis indexes
        Monte Carlo paths.
    schedule : EpsSchedule
    dt : float
        Grid step; the ladder is ``schedule.eps(dt)``.
    tol : float
        Tolerance for the last successive gap, or for the distance to
        ``target`` when one is given.
    ensemble : bool
        Treat axis 0 as the path axis: the reported estimate is the
        ensemble mean (with its standard error) and gaps are ensemble
        medians of per-path changes.
    richardson : bool
        Correct the smallest-eps estimate by extrapolating the fitted power
        law.  Off by default.
    times : sequence of float, optional
        Grid times labelling the last axis of path-valued estimates; enables
        the continuity diagnostic and per-time CSV rows.
    target : float, optional
        Known limit (e.g. 0 for residuals).  Then ``converged`` means the
        limit is within ``tol`` of the target and closer to it than the
        coarsest estimate.

    Returns
    -------
    LimitReport
    """
    eps = schedule.eps(dt)
    raw = []
    for e in eps:
        est = np.asarray(estimator(float(e)), dtype=float)
        if not np.all(np.isfinite(est)):
            raise NumericalError(f"non-finite estimate at eps={e!r}")
        raw.append(est)
    return summarize_ladder(eps, raw, tol, ensemble=ensemble, richardson=richardson,
                            times=times, target=target)


def summarize_ladder(eps: Sequence[float], raw: Sequence[np.ndarray], tol: float, *,
                     ensemble: bool = False, richardson: bool = False,
                     times: Optional[Sequence[float]] = None,
                     target: Optional[float] = None) -> LimitReport:
    """Build a :class:`LimitReport` from estimates already computed on a ladder.

    ``eps`` must decrease; any ladder parameter that tends to 0 works (for
    instance ``1/n`` for an approximation index ``n``).
    """
    eps = np.asarray(eps, dtype=float)
    raw = [np.asarray(r, dtype=float) for r in raw]
    if len(raw) != len(eps) or len(eps) < 2:
        raise InvalidArgumentError("need at least two ladder entries, one estimate each")
    means, errs = [], []
    for est in raw:
        if ensemble:
            M = est.shape[0]
            means.append(est.mean(axis=0))
            errs.append(est.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros(est.shape[1:]))
        else:
            means.append(est)
    gaps = []
    for a, b in zip(raw, raw[1:]):
        diff = np.abs(b - a)
        if ensemble:
            per_path = diff.reshape(diff.shape[0], -1).max(axis=1) if diff.ndim > 1 else diff
            gaps.append(float(np.median(per_path)))
        else:
            gaps.append(float(diff.max()) if diff.size else 0.0)
    rate = _fit_rate(eps, gaps)
    monotone = all(g1 <= g0 * (1 + 1e-12) + 1e-300 for g0, g1 in zip(gaps, gaps[1:]))
    last_gap = gaps[-1]
    limit = means[-1]
    if richardson and math.isfinite(rate) and rate > 0:
        r = eps[-2] / eps[-1]
        limit = means[-1] - (means[-2] - means[-1]) / (r ** rate - 1.0)
    if target is None:
        converged = monotone and last_gap <= tol
    else:
        first = float(np.max(np.abs(means[0] - target)))
        final = float(np.max(np.abs(np.asarray(limit) - target)))
        converged = final <= tol and (final < first or final == 0.0)
    continuity = None
    if times is not None:
        last = raw[-1]
        jumps = np.abs(np.diff(last, axis=-1))
        if ensemble and last.ndim > 1:
            continuity = float(np.median(jumps.reshape(last.shape[0], -1).max(axis=1)))
        else:
            continuity = float(jumps.max())
    rep = LimitReport(
        eps=[float(e) for e in eps], estimates=means, stderr=errs if ensemble else None,
        limit=limit, limit_stderr=errs[-1] if ensemble else None, gaps=gaps,
        spread=max(gaps), last_gap=last_gap, monotone=monotone,
        converged=bool(converged), rate=rate, tol=float(tol),
        richardson=richardson, continuity=continuity,
        times=None if times is None else np.asarray(times, dtype=float),
    )
    if target is not None:
        rep.notes["target"] = float(target)
    return rep
