"""Backward Cauchy problem ``d_s u + A_s u = h`` (with ``u(T) = g``):
generator, quasi-strict residuals, Feynman-Kac mild solutions and their
space gradients.

Sign convention
---------------
Mild solutions are ``u(s, x) = P_{s,T} g(x) - int_s^T P_{s,r} h(r, .)(x) dr``,
the same sign as the integrated identity ``u(s) = g - int_s^T h + int_s^T
A u`` satisfied by quasi-strict solutions.  With this convention a
quasi-strict solution is a mild solution; with a plus sign in front of the
source term it would not be.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._util import coerce
from .errors import BlowUpError, InvalidArgumentError, UnsupportedOperationError
from .functions import FunctionBundle, catalog
from .paths import SdeSpec, TimeGrid, make_grid
from .rng import standard_normals


@dataclass(frozen=True)
class CauchyProblem:
    """Coefficients of the backward problem.

    Callbacks are vectorized over a batch: ``x`` has shape ``(B, d)`` and
    ``s`` is a scalar or a ``(B,)`` array.  ``sigma`` returns ``(B, d, m)``,
    ``b`` returns ``(B, d)``, ``h`` returns ``(B,)`` and ``g(x)`` returns
    ``(B,)``.  The optional derivatives (``g_dx``: ``(B, d)``, ``h_dx``:
    ``(B, d)``, ``b_dx``: ``(B, d, d)``, ``sigma_dx``: ``(B, d, m, d)``) are
    needed only for gradients.
    """

    sigma: Callable
    b: Callable
    h: Callable
    g: Callable
    d: int = 1
    m: int = 1
    T: float = 1.0
    growth_degree: int = 2
    nondegenerate: bool = False
    c: float = 0.0
    name: str = "custom"
    g_dx: Optional[Callable] = None
    h_dx: Optional[Callable] = None
    b_dx: Optional[Callable] = None
    sigma_dx: Optional[Callable] = None
    time_discontinuities: tuple = ()

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise InvalidArgumentError("d and m must be >= 1")
        object.__setattr__(self, "time_discontinuities", tuple(float(t) for t in self.time_discontinuities))
        rng = np.random.default_rng(12345)
        s = rng.uniform(0.0, self.T, 64)
        x = rng.uniform(-3.0, 3.0, (64, self.d))
        sig = self.eval_sigma(s, x)
        for name, v in (("sigma", sig), ("b", self.eval_b(s, x)), ("h", self.eval_h(s, x)),
                        ("g", self.eval_g(x))):
            if not np.all(np.isfinite(v)):
                raise InvalidArgumentError(f"{self.name}: {name} not finite on the sampled range")
        if self.nondegenerate:
            xi = rng.standard_normal((64, self.d))
            a = np.einsum("bi,bij->bj", xi, sig)
            quad = np.sum(a * a, axis=1)
            bad = quad < self.c * np.sum(xi * xi, axis=1) - 1e-12
            if bad.any():
                j = int(np.argmax(bad))
                raise InvalidArgumentError(
                    f"{self.name}: nondegeneracy fails at s={s[j]:.4g}, x={x[j].tolist()}")

    # batch evaluation helpers; x may have any leading shape
    def _flat(self, s, x):
        x = np.asarray(x, dtype=float)
        lead = np.broadcast_shapes(np.shape(s), x.shape[:-1])
        xf = np.broadcast_to(x, lead + (self.d,)).reshape(-1, self.d)
        sf = np.broadcast_to(np.asarray(s, dtype=float), lead).reshape(-1)
        return lead, sf, xf

    def eval_sigma(self, s, x):
        lead, sf, xf = self._flat(s, x)
        return coerce(self.sigma(sf, xf), (len(xf),), (self.d, self.m)).reshape(lead + (self.d, self.m))

    def eval_b(self, s, x):
        lead, sf, xf = self._flat(s, x)
        return coerce(self.b(sf, xf), (len(xf),), (self.d,)).reshape(lead + (self.d,))

    def eval_h(self, s, x):
        lead, sf, xf = self._flat(s, x)
        return coerce(self.h(sf, xf), (len(xf),)).reshape(lead)

    def eval_g(self, x):
        x = np.asarray(x, dtype=float)
        xf = x.reshape(-1, self.d)
        return coerce(self.g(xf), (len(xf),)).reshape(x.shape[:-1])

    def to_sde(self) -> SdeSpec:
        return SdeSpec(drift=self.b, diffusion=self.sigma, d=self.d, m=self.m,
                       drift_dx=self.b_dx, diffusion_dx=self.sigma_dx)

    def with_source(self, h: Callable, h_dx: Optional[Callable] = None, g: Optional[Callable] = None):
        """Same dynamics with another source (and optionally terminal value)."""
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(h=h, h_dx=h_dx, time_discontinuities=())
        if g is not None:
            kw.update(g=g, g_dx=None)
        return CauchyProblem(**kw)


@dataclass(frozen=True)
class McConfig:
    M: int = 10_000
    n_steps: int = 256
    seed: int = 0
    antithetic: bool = False
    block: int = 4096
    workers: int = 1

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise InvalidArgumentError("M must be an integer >= 2")
        if self.antithetic and self.M % 2:
            raise InvalidArgumentError("antithetic sampling needs an even M")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgumentError("n_steps must be a positive integer")
        if self.block < 1 or self.workers < 1:
            raise InvalidArgumentError("block and workers must be >= 1")


@dataclass
class Estimate:
    """Monte Carlo estimate; ``value`` and ``stderr`` are scalars or vectors."""

    value: object
    stderr: object
    M: int

    def to_dict(self) -> dict:
        conv = lambda v: np.asarray(v, dtype=float).tolist()
        return {"value": conv(self.value), "stderr": conv(self.stderr), "M": int(self.M)}


def _estimate(samples: np.ndarray, M: int) -> Estimate:
    n = samples.shape[0]
    value = samples.mean(axis=0)
    err = samples.std(axis=0, ddof=1) / math.sqrt(n)
    if np.ndim(value) == 0:
        value, err = float(value), float(err)
    return Estimate(value, err, M)


# ------------------------------------------------------------------ generator

def apply_generator(bundle: FunctionBundle, prob: CauchyProblem, s, x):
    """``A_s f(x) = dx_f . b + 1/2 Tr(sigma^T d2f sigma)``, vectorized over ``x``."""
    if bundle.dx_f is None or bundle.dxx_f is None:
        raise UnsupportedOperationError("apply_generator needs dx_f and dxx_f")
    x = np.asarray(x, dtype=float)
    grad = bundle.gradient(s, x)
    hess = bundle.hessian(s, x)
    b = prob.eval_b(s, x)
    sig = prob.eval_sigma(s, x)
    first = np.sum(grad * b, axis=-1)
    second = 0.5 * np.einsum("...ia,...ij,...ja->...", sig, hess, sig)
    out = first + second
    return float(out) if out.ndim == 0 else out


def quasi_strict_residual(bundle: FunctionBundle, prob: CauchyProblem, x, grid: TimeGrid) -> float:
    """``sup_s |u(s,x) - g(x) + int_s^T (h - A u)(r, x) dr|`` over grid times.

    Trapezoidal quadrature per grid interval.  At declared time
    discontinuities (of the bundle or the problem) the interval is split and
    the integrand is evaluated one-sidedly, so piecewise smooth integrands
    are integrated to O(dt^2).  ``x`` is one state ``(d,)`` or several
    ``(P, d)``; the sup runs over all of them.
    """
    if bundle.reg_class not in ("C12", "C02ac", "C02ac_count"):
        raise InvalidArgumentError("quasi-strict residual needs a C^(0,2)_ac bundle")
    if abs(grid.T - prob.T) > 1e-12:
        raise InvalidArgumentError("grid must end at the problem horizon")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jumps = sorted({c for c in bundle.time_discontinuities + prob.time_discontinuities
                    if grid.t0 < c < grid.T})
    nodes = np.union1d(grid.times, jumps)
    tiny = 1e-12 * max(1.0, abs(grid.T))

    def integrand(t):
        tt = np.full((1,), t)[:, None]
        return prob.eval_h(tt, x[None]) - apply_generator(bundle, prob, tt, x[None])

    qL = np.stack([integrand(t) for t in nodes])[:, 0]
    qR = qL.copy()
    for c in jumps:
        i = int(np.searchsorted(nodes, c))
        qL[i] = integrand(c - tiny)[0]
        qR[i] = integrand(c + tiny)[0]
    pieces = 0.5 * (qR[:-1] + qL[1:]) * np.diff(nodes)[:, None]
    tail = np.concatenate([np.cumsum(pieces[::-1], axis=0)[::-1], np.zeros((1, x.shape[0]))])
    on_grid = np.searchsorted(nodes, grid.times)
    u = bundle.value(grid.times[:, None], x[None])
    res = u - prob.eval_g(x)[None] + tail[on_grid]
    return float(np.max(np.abs(res)))


# ------------------------------------------------------------------ Monte Carlo

def _simulate(prob: CauchyProblem, s: float, x, mc: McConfig, sources: Sequence[Callable] = (),
              g: Optional[Callable] = None, source_grads: Optional[Sequence[Callable]] = None,
              grad: bool = False, record: Optional[Callable] = None):
    """Simulate paths of the problem's SDE from ``(s, x)`` to ``T``.

    Returns per-path samples of ``g(X_T)`` and of ``int_s^T h_j(r, X_r) dr``
    for each source (left-point rule).  With ``grad=True`` also the
    first-variation products ``g'(X_T) Z_T`` and ``int dx_h_j Z dr``.
    ``record(k, t, X)`` is called at every grid step if given.  Noise for
    path ``i`` depends only on ``(seed, i)``, so calls with the same seed
    share random numbers.
    """
    d, m = prob.d, prob.m
    n = mc.n_steps
    dt = (prob.T - s) / n
    if dt < 0:
        raise InvalidArgumentError(f"start time {s} after horizon {prob.T}")
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (d,))
    gfun = prob.g if g is None else g
    S = len(sources)
    n_draw = mc.M // 2 if mc.antithetic else mc.M
    gT = np.empty(mc.M)
    ints = np.empty((S, mc.M))
    if grad:
        if None in (prob.b_dx, prob.sigma_dx) or (g is None and prob.g_dx is None):
            raise UnsupportedOperationError("gradient needs b_dx, sigma_dx and g_dx")
        gdx = prob.g_dx
        ggrad = np.empty((mc.M, d))
        igrad = np.empty((S, mc.M, d))
        sgrads = source_grads if source_grads is not None else [None] * S
        if any(fn is None for fn in sgrads) and S:
            raise UnsupportedOperationError("gradient needs the source derivative h_dx")
    for start in range(0, n_draw, mc.block):
        stop = min(start + mc.block, n_draw)
        z = standard_normals(mc.seed, np.arange(start, stop), (n, m), workers=mc.workers)
        dW = z * math.sqrt(dt)
        if mc.antithetic:
            dW = np.concatenate([dW, -dW])
            rows = np.r_[start:stop, n_draw + start:n_draw + stop]
        else:
            rows = np.arange(start, stop)
        B = dW.shape[0]
        X = np.repeat(x0[None], B, axis=0)
        acc = np.zeros((S, B))
        if grad:
            Z = np.repeat(np.eye(d)[None], B, axis=0)
            gacc = np.zeros((S, B, d))
        for k in range(n):
            t = s + k * dt
            if record is not None:
                record(k, t, X, rows)
            tv = np.full(B, t)
            for j, hj in enumerate(sources):
                acc[j] += coerce(hj(tv, X), (B,)) * dt
            drift = coerce(prob.b(tv, X), (B,), (d,))
            sig = coerce(prob.sigma(tv, X), (B,), (d, m))
            if grad:
                for j, hj in enumerate(sgrads):
                    gacc[j] += np.einsum("bi,bij->bj", coerce(hj(tv, X), (B,), (d,)), Z) * dt
                Jb = coerce(prob.b_dx(tv, X), (B,), (d, d))
                Js = coerce(prob.sigma_dx(tv, X), (B,), (d, m, d))
                Z = Z + np.einsum("bik,bkl->bil", Jb, Z) * dt \
                    + np.einsum("bijk,bkl,bj->bil", Js, Z, dW[:, k])
            X = X + drift * dt + np.einsum("bij,bj->bi", sig, dW[:, k])
            if not np.all(np.isfinite(X)):
                raise BlowUpError(k + 1, rows[np.flatnonzero(~np.isfinite(X).all(axis=1))])
        if record is not None:
            record(n, prob.T, X, rows)
        gT[rows] = coerce(gfun(X), (B,))
        ints[:, rows] = acc
        if grad:
            ggrad[rows] = np.einsum("bi,bij->bj", coerce(gdx(X), (B,), (d,)), Z)
            igrad[:, rows] = gacc
    out = {"g": gT, "int": ints}
    if grad:
        out["g_grad"] = ggrad
        out["int_grad"] = igrad
    return out


def _pair_means(v, mc):
    """Average antithetic pairs so the stderr uses independent samples."""
    if not mc.antithetic:
        return v
    half = mc.M // 2
    return 0.5 * (v[:half] + v[half:])


def mild_samples(prob: CauchyProblem, s: float, x, mc: McConfig) -> np.ndarray:
    """Per-path samples of ``g(X_T) - int_s^T h(r, X_r) dr``."""
    if s == prob.T:
        return np.repeat(prob.eval_g(np.asarray(x, dtype=float)[None])[0], mc.M)
    out = _simulate(prob, s, x, mc, sources=[prob.h])
    return out["g"] - out["int"][0]


def mild_solve(prob: CauchyProblem, s: float, x, mc: McConfig) -> Estimate:
    """Feynman-Kac estimate of the mild solution at ``(s, x)``.

    Euler-Maruyama with ``mc.n_steps`` steps on ``[s, T]``; the source
    integral uses the left-point rule along the same paths.  At ``s = T``
    the terminal value ``g(x)`` is returned exactly with zero stderr.
    """
    if not np.isfinite(s) or s > prob.T:
        raise InvalidArgumentError(f"s must be finite and at most T = {prob.T}")
    if s == prob.T:
        return Estimate(float(prob.eval_g(np.asarray(x, dtype=float)[None])[0]), 0.0, mc.M)
    return _estimate(_pair_means(mild_samples(prob, s, x, mc), mc), mc.M)


def mild_grad(prob: CauchyProblem, s: float, x, mc: McConfig) -> Estimate:
    """Space gradient of the mild solution via the first variation process.

    Sample mean of ``g'(X_T) Z_T - int_s^T dx_h(r, X_r) Z_r dr`` (vector of
    length ``d``).
    """
    if prob.h_dx is None:
        raise UnsupportedOperationError("mild_grad needs h_dx")
    out = _simulate(prob, s, x, mc, sources=[prob.h], source_grads=[prob.h_dx], grad=True)
    samples = out["g_grad"] - out["int_grad"][0]
    return _estimate(_pair_means(samples, mc), mc.M)


def fd_gradient(prob: CauchyProblem, s: float, x, mc: McConfig, step: float = 1e-2) -> Estimate:
    """Central finite differences of :func:`mild_solve` with common random numbers."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (prob.d,))
    cols = []
    for i in range(prob.d):
        e = np.zeros(prob.d)
        e[i] = step
        up = mild_samples(prob, s, x + e, mc)
        dn = mild_samples(prob, s, x - e, mc)
        cols.append((up - dn) / (2 * step))
    return _estimate(_pair_means(np.stack(cols, axis=1), mc), mc.M)


# ------------------------------------------------------------------ oracles and catalog

def oracle_solution(name: str, params: Optional[dict] = None, s: float = 0.0, x=0.0) -> float:
    """Closed-form solutions of the catalog problems.

    ``heat_quadratic``: ``|x|^2 + d (T - s)``; ``constant_source``:
    ``-(T - s)``; ``ou_linear``: ``(sum x) exp(-kappa (T - s))``.
    """
    p = dict(params or {})
    T = float(p.get("T", 1.0))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if name == "heat_quadratic":
        return float(np.sum(x * x) + x.size * (T - s))
    if name == "constant_source":
        return float(-(T - s))
    if name == "ou_linear":
        return float(np.sum(x) * math.exp(-float(p.get("kappa", 1.0)) * (T - s)))
    raise InvalidArgumentError(f"unknown oracle {name!r}")


ORACLE_PROBLEMS = {"heat_quadratic": "heat", "constant_source": "constant_source", "ou_linear": "ou"}


def _zeros(shape):
    return lambda s, x: np.zeros((x.shape[0],) + shape)


def problem(name: str, params: Optional[dict] = None, **kwargs) -> CauchyProblem:
    """Catalog of Cauchy problems.

    ``heat``: unit diffusion, ``g = |x|^2``, ``h = 0``.  ``constant_source``:
    unit diffusion, ``g = 0``, ``h = 1``.  ``ou``: drift ``-kappa x``, unit
    diffusion, ``g = sum x``, ``h = 0``.  ``separable_kink``: unit diffusion,
    ``h = sign(s - c) + d``, ``g = |x|^2 + |T - c|``.  ``abs_source``: unit
    diffusion, ``g = 0``, ``h = |x|``.
    """
    p = dict(params or {})
    p.update(kwargs)
    d = int(p.get("d", 1))
    T = float(p.get("T", 1.0))
    eye = np.eye(d)
    unit = dict(sigma=lambda s, x: np.broadcast_to(eye, (x.shape[0], d, d)),
                sigma_dx=_zeros((d, d, d)), d=d, m=d, T=T, nondegenerate=True, c=1.0)
    flat = dict(b=_zeros((d,)), b_dx=_zeros((d, d)))
    if name == "heat":
        return CauchyProblem(h=lambda s, x: np.zeros(x.shape[0]), h_dx=_zeros((d,)),
                             g=lambda x: np.sum(x * x, axis=-1), g_dx=lambda x: 2.0 * x,
                             growth_degree=2, name=name, **unit, **flat)
    if name == "constant_source":
        return CauchyProblem(h=lambda s, x: np.ones(x.shape[0]), h_dx=_zeros((d,)),
                             g=lambda x: np.zeros(x.shape[0]), g_dx=lambda x: np.zeros(x.shape),
                             growth_degree=0, name=name, **unit, **flat)
    if name == "ou":
        kappa = float(p.get("kappa", 1.0))
        return CauchyProblem(b=lambda s, x: -kappa * x,
                             b_dx=lambda s, x: np.broadcast_to(-kappa * eye, (x.shape[0], d, d)),
                             h=lambda s, x: np.zeros(x.shape[0]), h_dx=_zeros((d,)),
                             g=lambda x: np.sum(x, axis=-1), g_dx=lambda x: np.ones(x.shape),
                             growth_degree=1, name=name, **unit)
    if name == "separable_kink":
        c = float(p.get("c", 0.5))
        return CauchyProblem(h=lambda s, x: np.sign(np.asarray(s) - c) + d + np.zeros(x.shape[0]),
                             h_dx=_zeros((d,)),
                             g=lambda x: np.sum(x * x, axis=-1) + abs(T - c), g_dx=lambda x: 2.0 * x,
                             growth_degree=2, time_discontinuities=(c,), name=name, **unit, **flat)
    if name == "abs_source":
        def h_dx(s, x):
            r = np.linalg.norm(x, axis=-1, keepdims=True)
            return np.divide(x, r, out=np.zeros_like(x), where=r > 0)
        return CauchyProblem(h=lambda s, x: np.linalg.norm(x, axis=-1), h_dx=h_dx,
                             g=lambda x: np.zeros(x.shape[0]), g_dx=lambda x: np.zeros(x.shape),
                             growth_degree=1, name=name, **unit, **flat)
    raise InvalidArgumentError(f"unknown problem {name!r}")


PROBLEMS = ("heat", "constant_source", "ou", "separable_kink", "abs_source")


def exact_pairs(params: Optional[dict] = None):
    """``(problem, bundle)`` pairs where the bundle is an exact quasi-strict solution."""
    p = dict(params or {})
    return [
        (problem("heat", p), catalog("heat_solution", p)),
        (problem("constant_source", p), catalog("constant_source_solution", p)),
        (problem("ou", p), catalog("ou_solution", p)),
        (problem("separable_kink", p), catalog("separable", p)),
    ]


# ------------------------------------------------------------------ moments

@dataclass
class MomentReport:
    p: int
    xs: list
    sup_moments: list
    stderr: list
    C: float
    slope: float
    intercept: float
    passed: bool
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("p", "xs", "sup_moments", "stderr", "C", "slope",
                                               "intercept", "passed")}


def polynomial_moment_check(prob: CauchyProblem, p: int, mc: McConfig, s: float = 0.0,
                            radii: Sequence[float] = (0.0, 1.0, 2.0, 4.0)) -> MomentReport:
    """Estimate ``sup_r E^{s,x} |X_r|^p`` at ``x = rho e_1`` for each radius.

    The growth bound ``C (1 + |x|^p)`` is checked with the smallest constant
    that covers every sample, ``C = max m(x) / (1 + |x|^p)``; the least
    squares fit ``m = intercept + slope |x|^p`` is reported alongside.
    """
    if int(p) != p or p < 1:
        raise InvalidArgumentError("p must be an integer >= 1")
    xs, sup_m, errs = [], [], []
    for rho in radii:
        x = np.zeros(prob.d)
        x[0] = rho
        sums = np.zeros(mc.n_steps + 1)
        sq = np.zeros(mc.n_steps + 1)

        def record(k, t, X, rows):
            v = np.sum(X * X, axis=1) ** (p / 2)
            sums[k] += v.sum()
            sq[k] += (v * v).sum()

        _simulate(prob, s, x, mc, record=record)
        mean = sums / mc.M
        var = np.maximum(sq / mc.M - mean ** 2, 0.0)
        k = int(np.argmax(mean))
        xs.append(float(rho))
        sup_m.append(float(mean[k]))
        errs.append(float(math.sqrt(var[k] * mc.M / (mc.M - 1) / mc.M)))
    a = np.asarray(xs) ** p
    m = np.asarray(sup_m)
    C = float(np.max(m / (1.0 + a)))
    slope, intercept = np.polyfit(a, m, 1) if len(a) > 1 else (float("nan"), float("nan"))
    return MomentReport(p=int(p), xs=xs, sup_moments=sup_m, stderr=errs, C=C, slope=float(slope),
                        intercept=float(intercept), passed=bool(np.isfinite(C)))
