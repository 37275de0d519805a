"""Quasi-strong solutions as limits of quasi-strict ones.

The source is cut off to a compact set and smoothed in space,
``h_n = mollify(truncate(h, n), n)``; the mild solutions ``u_n`` with source
``h_n`` are then compared with the mild solution ``u`` of the original
problem on a (time x compact) evaluation grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import InvalidArgumentError, NumericalError
from .functions import _base_points, _box
from .paths import TimeGrid
from .pde import CauchyProblem, McConfig, _simulate

GAUSS_ORDER = 16
QMC_NODES = 4096


def smoothstep(t):
    """Quintic smoothstep ``6t^5 - 15t^4 + 10t^3`` clamped to [0, 1] (C^2)."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def cutoff(x, n: float):
    """Product cutoff: 1 on ``[-n, n]^d``, 0 outside ``[-(n+1), n+1]^d``."""
    x = np.asarray(x, dtype=float)
    return np.prod(1.0 - smoothstep(np.abs(x) - n), axis=-1)


def _check_n(n):
    if int(n) != n or n < 1:
        raise InvalidArgumentError("n must be an integer >= 1")


def truncate(h: Callable, n: int) -> Callable:
    """``h * chi_n`` with the smoothstep cutoff ``chi_n``."""
    _check_n(n)

    def h_n(s, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(h(s, x), dtype=float) * cutoff(x, n)

    h_n.__name__ = f"truncate_{n}"
    return h_n


def bump(xi):
    """Unnormalized bump ``exp(-1 / (1 - |xi|^2))`` on the open unit ball."""
    r2 = np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1)
    inside = r2 < 1.0
    out = np.zeros(r2.shape)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def _bump_grad(xi):
    r2 = np.sum(xi * xi, axis=-1)
    inside = r2 < 1.0
    fac = np.zeros(r2.shape)
    fac[inside] = -2.0 / (1.0 - r2[inside]) ** 2
    return (bump(xi) * fac)[..., None] * xi


@lru_cache(maxsize=None)
def mollifier_rule(d: int):
    """Nodes ``xi`` (Q, d), value weights ``W`` (Q,) and gradient weights ``G`` (Q, d).

    ``sum W f(xi)`` approximates ``int phi f`` with the normalized bump
    ``phi``; ``sum G f(xi)`` approximates ``int grad(phi) f``.  For ``d <= 2``
    a tensor Gauss-Legendre rule of order 16 on the bounding box is used,
    otherwise 4096 scrambled Sobol nodes (symmetrized).  Both weight sets are
    normalized discretely so constants and linear functions are reproduced
    exactly.
    """
    if d <= 2:
        t, w = np.polynomial.legendre.leggauss(GAUSS_ORDER)
        t = 0.5 * (t - t[::-1])
        w = 0.5 * (w + w[::-1])
        grids = np.meshgrid(*([t] * d), indexing="ij")
        xi = np.stack([g.ravel() for g in grids], axis=-1)
        wq = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij")), axis=0).ravel()
    else:
        half = qmc.Sobol(d, scramble=True, seed=0).random(QMC_NODES // 2) * 2.0 - 1.0
        xi = np.vstack([half, -half])
        wq = np.full(len(xi), 2.0 ** d / len(xi))
    keep = bump(xi) > 0
    xi, wq = xi[keep], wq[keep]
    raw = wq * bump(xi)
    W = raw / raw.sum()
    if not np.isfinite(W).all() or abs(W.sum() - 1.0) > 1e-10:
        raise NumericalError(f"mollifier weights drift from 1 by {abs(W.sum() - 1.0):.3g}")
    G = wq[:, None] * _bump_grad(xi) / raw.sum()
    # int grad(phi) xi^T = -I; correct G so the discrete rule satisfies it exactly
    A = -(G.T @ xi)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e6:
        raise NumericalError("degenerate mollifier gradient weights")
    G = np.linalg.solve(A, G.T).T
    for a in (xi, W, G):
        a.flags.writeable = False
    return xi, W, G


def _convolve(h, n, s, x, weights):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    xi, W, G = mollifier_rule(d)
    wts = W if weights == "value" else G
    lead = np.broadcast_shapes(np.shape(s), x.shape[:-1])
    xf = np.broadcast_to(x, lead + (d,)).reshape(-1, d)
    sf = np.broadcast_to(np.asarray(s, dtype=float), lead).reshape(-1)
    B, Q = len(xf), len(xi)
    y = (xf[:, None, :] - xi[None] / n).reshape(B * Q, d)
    vals = np.asarray(h(np.repeat(sf, Q), y), dtype=float).reshape(B, Q)
    if weights == "value":
        return (vals @ wts).reshape(lead)
    return (n * (vals @ wts)).reshape(lead + (d,))


def mollify(h: Callable, n: int) -> Callable:
    """Space convolution ``h_n(s, y) = int phi(xi) h(s, y - xi/n) dxi``.

    ``h`` must accept a batch ``(s: (B,), x: (B, d))``.  The support of the
    kernel has diameter ``2/n``.
    """
    _check_n(n)

    def h_n(s, x):
        return _convolve(h, n, s, x, "value")

    h_n.__name__ = f"mollify_{n}"
    return h_n


def mollify_grad(h: Callable, n: int) -> Callable:
    """Space gradient of :func:`mollify` by differentiating the kernel.

    ``dh_n(y) = n int grad(phi)(xi) h(y - xi/n) dxi``; ``h`` itself need not
    be differentiable.
    """
    _check_n(n)

    def dh_n(s, x):
        return _convolve(h, n, s, x, "grad")

    dh_n.__name__ = f"mollify_grad_{n}"
    return dh_n


def approximate_source(h: Callable, n: int) -> Callable:
    return mollify(truncate(h, n), n)


# ------------------------------------------------------------------ sequences

@dataclass
class ApproxSequence:
    """Mild solutions ``u_n`` of the approximating problems on a shared grid.

    Surfaces have shape ``(len(times), len(points))``; gradient surfaces
    (optional) add a trailing ``d`` axis.  ``diff_stderr[j]`` is the Monte
    Carlo standard error of ``u_n - u_ref`` at each grid point.
    """

    indices: list
    h_n: list
    u_n: list
    u_ref: np.ndarray
    times: np.ndarray
    points: np.ndarray
    diff_stderr: list
    grad_n: Optional[list] = None
    grad_ref: Optional[np.ndarray] = None
    T: float = 1.0
    notes: dict = field(default_factory=dict)


def build_sequence(prob: CauchyProblem, indices: Sequence[int], K, eval_grid, mc: McConfig,
                   gradients: bool = False) -> ApproxSequence:
    """Approximating mild solutions with common random numbers.

    Parameters
    ----------
    prob : CauchyProblem
        Any ``g`` is allowed; the terminal part ``E g(X_T)`` is shared by
        every ``u_n`` and ``u_ref``.
    indices : increasing integers ``n``.
    K : box containing the evaluation points.
    eval_grid : (times, points)
        Start times in ``[0, T]`` and states ``(P, d)`` (or ``(P,)`` when
        ``d = 1``).
    mc : McConfig
        One noise ensemble (same seed) is reused for every start point and
        every ``n``.
    gradients : bool
        Also estimate space gradients by the first variation process (needs
        the problem's derivative callbacks).
    """
    indices = [int(n) for n in indices]
    if not indices or any(b <= a for a, b in zip(indices, indices[1:])):
        raise InvalidArgumentError("indices must be nonempty and strictly increasing")
    for n in indices:
        _check_n(n)
    times = np.asarray(eval_grid[0], dtype=float)
    pts = np.asarray(eval_grid[1], dtype=float).reshape(len(eval_grid[1]), -1)
    if pts.shape[1] != prob.d:
        raise InvalidArgumentError("evaluation points must have dimension d")
    K = _box(K, prob.d)
    if np.any(pts < K[:, 0] - 1e-12) or np.any(pts > K[:, 1] + 1e-12):
        raise InvalidArgumentError("evaluation points must lie in K")
    if np.any(times > prob.T) or np.any(np.diff(times) <= 0):
        raise InvalidArgumentError("evaluation times must increase and not exceed T")
    sources = [approximate_source(prob.h, n) for n in indices] + [prob.h]
    grads = None
    if gradients:
        if prob.h_dx is None:
            raise InvalidArgumentError("gradients need the source derivative h_dx")
        grads = [mollify_grad(truncate(prob.h, n), n) for n in indices] + [prob.h_dx]
    N, nt, P, d = len(indices), len(times), len(pts), prob.d
    U = np.empty((N + 1, nt, P))
    SE = np.zeros((N, nt, P))
    DU = np.empty((N + 1, nt, P, d)) if gradients else None
    for i, s in enumerate(times):
        for j, x in enumerate(pts):
            if s == prob.T:
                U[:, i, j] = prob.eval_g(x[None])[0]
                if gradients:
                    DU[:, i, j] = prob.g_dx(x[None])[0]
                continue
            out = _simulate(prob, s, x, mc, sources=sources, source_grads=grads, grad=gradients)
            vals = out["g"][None] - out["int"]
            U[:, i, j] = vals.mean(axis=1)
            diff = vals[:N] - vals[N][None]
            SE[:, i, j] = diff.std(axis=1, ddof=1) / math.sqrt(mc.M)
            if gradients:
                DU[:, i, j] = (out["g_grad"][None] - out["int_grad"]).mean(axis=1)
    return ApproxSequence(
        indices=indices, h_n=sources[:N], u_n=[U[k] for k in range(N)], u_ref=U[N],
        times=times, points=pts, diff_stderr=[SE[k] for k in range(N)],
        grad_n=[DU[k] for k in range(N)] if gradients else None,
        grad_ref=DU[N] if gradients else None, T=prob.T,
        notes={"mc": {"M": mc.M, "n_steps": mc.n_steps, "seed": mc.seed}},
    )


@dataclass
class ConvergenceReport:
    indices: list
    sup_u_err: list
    l1_h_err: list
    passed: bool
    trend: dict
    tol_u: float
    tol_h: float

    def to_dict(self) -> dict:
        clean = lambda v: None if not math.isfinite(v) else float(v)
        return {"indices": list(self.indices), "sup_u_err": [float(v) for v in self.sup_u_err],
                "l1_h_err": [float(v) for v in self.l1_h_err], "pass": bool(self.passed),
                "trend": {k: clean(v) for k, v in self.trend.items()},
                "tol_u": self.tol_u, "tol_h": self.tol_h}


def _eventually_decreasing(v) -> bool:
    v = np.asarray(v, dtype=float)
    if np.all(v == 0):
        return True
    return bool(v[-1] <= v[-2] + 1e-12 and v[-1] < v[0])


def _trend(indices, v) -> float:
    v = np.asarray(v, dtype=float)
    ok = v > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(indices, dtype=float)[ok]), np.log(v[ok]), 1)[0])


def convergence_report(seq: ApproxSequence, h: Callable, K, time_grid: TimeGrid,
                       tol_u: float = 0.05, tol_h: float = 0.05, samples: int = 401
                       ) -> ConvergenceReport:
    """Both error sequences of the approximation and the pass verdict.

    ``sup_u_err[n]`` is the max of ``|u_n - u_ref|`` over the evaluation
    grid; ``l1_h_err[n]`` is the trapezoidal L1 norm over ``time_grid`` of
    ``s -> sup_{x in K} |h_n - h|(s, x)`` with the sup over ``samples``
    quasi-uniform points of ``K``.  The report passes when both sequences
    end non-increasing below their first value and the final values are
    within tolerance.  ``trend`` holds the fitted log-log slopes in ``n``.
    """
    K = _box(K, seq.points.shape[1])
    sup_u = [float(np.max(np.abs(u - seq.u_ref))) for u in seq.u_n]
    xs = _base_points(K, samples)
    times = time_grid.times
    l1 = []
    for hn in seq.h_n:
        sup_t = np.empty(len(times))
        for i, t in enumerate(times):
            tv = np.full(len(xs), t)
            sup_t[i] = np.max(np.abs(np.asarray(hn(tv, xs)) - np.asarray(h(tv, xs))))
        l1.append(float(np.trapezoid(sup_t, times)))
    ok = (_eventually_decreasing(sup_u) and _eventually_decreasing(l1)
          and sup_u[-1] <= tol_u and l1[-1] <= tol_h)
    return ConvergenceReport(indices=list(seq.indices), sup_u_err=sup_u, l1_h_err=l1, passed=bool(ok),
                             trend={"u": _trend(seq.indices, sup_u), "h": _trend(seq.indices, l1)},
                             tol_u=float(tol_u), tol_h=float(tol_h))
