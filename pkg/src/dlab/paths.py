"""Uniform time grids, sample paths and seeded path ensembles.

Every path object follows the constant-extension convention: a path known
on ``[t0, T]`` is read as ``values[0]`` before ``t0`` and ``values[-1]``
after ``T``.  Ensembles store their data as one array of shape
``(M, n_steps + 1) + shape`` so that estimators can vectorize over paths.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import rng
from ._util import coerce
from .errors import BlowUpError, InvalidArgumentError, NumericalError, UnsupportedOperationError

MAX_FBM_STEPS = 2 ** 14
_CHOLESKY_LIMIT = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``s_k = t0 + k*dt`` for ``k = 0..n_steps``."""

    t0: float
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        s = self.t0 + np.arange(self.n_steps + 1) * self.dt
        s[-1] = self.T
        s.flags.writeable = False
        return s

    def multiple(self, eps: float) -> int:
        """Return k with ``eps == k*dt``; raise if eps is not a grid multiple."""
        k = eps / self.dt
        kr = int(round(k))
        if kr < 1 or abs(k - kr) > 1e-8 * max(1.0, k):
            raise InvalidArgumentError(f"eps={eps!r} is not a positive integer multiple of dt={self.dt!r}")
        return kr

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.n_steps % factor:
            raise InvalidArgumentError(f"cannot coarsen {self.n_steps} steps by {factor}")
        return TimeGrid(self.t0, self.T, self.n_steps // factor)


def make_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid on ``[t0, T]`` with ``n_steps`` intervals.

    >>> make_grid(0, 1, 4).times.tolist()
    [0.0, 0.25, 0.5, 0.75, 1.0]
    """
    t0, T = float(t0), float(T)
    if not (math.isfinite(t0) and math.isfinite(T)):
        raise InvalidArgumentError("grid bounds must be finite")
    if not t0 < T:
        raise InvalidArgumentError(f"need t0 < T, got t0={t0}, T={T}")
    if int(n_steps) != n_steps or n_steps < 2:
        raise InvalidArgumentError(f"n_steps must be an integer >= 2, got {n_steps!r}")
    return TimeGrid(t0, T, int(n_steps))


def _interp(grid: TimeGrid, values: np.ndarray, s, axis: int):
    s = np.asarray(s, dtype=float)
    pos = np.clip((s - grid.t0) / grid.dt, 0.0, grid.n_steps)
    lo = np.minimum(np.floor(pos).astype(int), grid.n_steps - 1)
    w = pos - lo
    a = np.take(values, lo, axis=axis)
    b = np.take(values, lo + 1, axis=axis)
    w = w.reshape((1,) * axis + w.shape + (1,) * (values.ndim - axis - 1))
    return a + w * (b - a)


class SamplePath:
    """One discretized trajectory on a grid.

    ``values`` has shape ``(n_steps + 1, d)``; matrix-valued paths (such as a
    first-variation process) use ``(n_steps + 1, d, d)``.
    """

    def __init__(self, grid: TimeGrid, values):
        values = np.array(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.n_steps + 1:
            raise InvalidArgumentError(
                f"path has {values.shape[0]} points, grid expects {grid.n_steps + 1}")
        if not np.all(np.isfinite(values)):
            raise NumericalError("sample path contains non-finite values")
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, s):
        """Linear interpolation inside the grid, constant extension outside."""
        return _interp(self.grid, self.values, s, axis=0)

    __call__ = at

    def __repr__(self):
        return f"SamplePath(n_steps={self.grid.n_steps}, shape={self.values.shape[1:]})"


class PathEnsemble:
    """M paths sharing one grid, stored as an array ``(M, n_steps + 1, ...)``."""

    def __init__(self, grid: TimeGrid, values, seed: int = 0, label: str = ""):
        values = np.array(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim < 3 or values.shape[0] < 1:
            raise InvalidArgumentError("ensemble values must have shape (M, n_steps+1, d)")
        if values.shape[1] != grid.n_steps + 1:
            raise InvalidArgumentError(
                f"ensemble has {values.shape[1]} time points, grid expects {grid.n_steps + 1}")
        if not np.all(np.isfinite(values)):
            raise NumericalError("ensemble contains non-finite values")
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.seed = int(seed)
        self.label = label

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def __len__(self):
        return self.M

    def __getitem__(self, i) -> SamplePath:
        return SamplePath(self.grid, self.values[i])

    def __iter__(self):
        return (self[i] for i in range(self.M))

    @property
    def paths(self):
        return list(self)

    def at(self, s):
        return _interp(self.grid, self.values, s, axis=1)

    def __repr__(self):
        return f"PathEnsemble(M={self.M}, n_steps={self.grid.n_steps}, dim={self.dim}, label={self.label!r})"


def unwrap(obj):
    """Return ``(grid, values)`` for a SamplePath or PathEnsemble."""
    if isinstance(obj, (SamplePath, PathEnsemble)):
        return obj.grid, obj.values
    raise InvalidArgumentError(f"expected SamplePath or PathEnsemble, got {type(obj).__name__}")


def rewrap(like, grid, values, label=""):
    """Wrap ``values`` in the same container kind as ``like``."""
    if isinstance(like, PathEnsemble):
        return PathEnsemble(grid, values, seed=like.seed, label=label or like.label)
    return SamplePath(grid, values)


def same_grid(*objs) -> TimeGrid:
    grids = [o.grid for o in objs]
    if any(g != grids[0] for g in grids[1:]):
        raise InvalidArgumentError("inputs live on different time grids")
    kinds = {isinstance(o, PathEnsemble) for o in objs}
    if len(kinds) > 1:
        raise InvalidArgumentError("cannot mix SamplePath and PathEnsemble inputs")
    ms = {o.M for o in objs if isinstance(o, PathEnsemble)}
    if len(ms) > 1:
        raise InvalidArgumentError(f"ensembles have different sizes {sorted(ms)}")
    return grids[0]


# ---------------------------------------------------------------- generators

def brownian_values(grid: TimeGrid, dim: int, indices, seed: int, workers: int = 1) -> np.ndarray:
    """Brownian paths (zero at t0) for the given global path indices."""
    z = rng.standard_normals(seed, indices, (grid.n_steps, dim), stream=rng.BROWNIAN, workers=workers)
    z *= math.sqrt(grid.dt)
    out = np.zeros((z.shape[0], grid.n_steps + 1, dim))
    np.cumsum(z, axis=1, out=out[:, 1:])
    return out


def gen_brownian(grid: TimeGrid, dim: int, M: int, seed: int, workers: int = 1) -> PathEnsemble:
    """Seeded ensemble of ``M`` standard Brownian motions in ``R^dim``.

    Path ``i`` is a pure function of ``(seed, i)``; the ensemble is identical
    for every ``workers`` value and path ``i`` does not depend on ``M``.
    """
    if dim < 1 or M < 1:
        raise InvalidArgumentError("dim and M must be >= 1")
    vals = brownian_values(grid, dim, np.arange(M), seed, workers)
    return PathEnsemble(grid, vals, seed=seed, label=f"brownian(d={dim})")


def fgn_autocovariance(hurst: float, n: int) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    h2 = 2.0 * hurst
    return 0.5 * ((k + 1) ** h2 - 2 * k ** h2 + np.abs(k - 1) ** h2)


def _fbm_cholesky(grid, hurst, M, seed, workers):
    t = grid.times[1:] - grid.t0
    h2 = 2.0 * hurst
    cov = 0.5 * (t[:, None] ** h2 + t[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)
    try:
        L = scipy.linalg.cholesky(cov, lower=True, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"fBm covariance factorization failed: {exc}") from exc
    del cov
    z = rng.standard_normals(seed, np.arange(M), (grid.n_steps,), stream=rng.FBM, workers=workers)
    out = np.zeros((M, grid.n_steps + 1))
    out[:, 1:] = z @ L.T
    return out


def _fbm_circulant(grid, hurst, M, seed, workers):
    # Davies-Harte embedding of fractional Gaussian noise
    n = grid.n_steps
    gamma = fgn_autocovariance(hurst, n)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10 * lam.max():
        raise NumericalError(f"circulant embedding not nonnegative (min eigenvalue {lam.min():.3e})")
    lam = np.clip(lam, 0.0, None)
    N = row.size
    z = rng.standard_normals(seed, np.arange(M), (2, N), stream=rng.FBM, workers=workers)
    w = np.sqrt(lam / N) * (z[:, 0] + 1j * z[:, 1])
    incs = np.fft.fft(w, axis=1)[:, :n].real * grid.dt ** hurst
    out = np.zeros((M, n + 1))
    np.cumsum(incs, axis=1, out=out[:, 1:])
    return out


def gen_fbm(grid: TimeGrid, hurst: float, M: int, seed: int, method: str = "auto",
            workers: int = 1) -> PathEnsemble:
    """Seeded ensemble of one-dimensional fractional Brownian motions.

    Paths start at 0 at ``grid.t0`` and have covariance
    ``(|s|^2H + |r|^2H - |s-r|^2H) / 2`` in the elapsed times ``s, r``.

    Parameters
    ----------
    grid : TimeGrid
        At most ``2**14`` steps.
    hurst : float
        Hurst index in ``(0, 1)``.
    M, seed : int
        Ensemble size and master seed.
    method : {"auto", "cholesky", "circulant"}
        Both methods are exact in law.  ``"cholesky"`` factorizes the full
        covariance of the path levels (O(n^2) memory); ``"circulant"`` uses
        the Davies-Harte embedding of the increments.  ``"auto"`` uses
        Cholesky up to 4096 steps.
    """
    if not (0.0 < hurst < 1.0):
        raise InvalidArgumentError(f"hurst must lie in (0, 1), got {hurst!r}")
    if grid.n_steps > MAX_FBM_STEPS:
        raise InvalidArgumentError(f"gen_fbm supports at most {MAX_FBM_STEPS} steps")
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    if method == "auto":
        method = "cholesky" if grid.n_steps <= _CHOLESKY_LIMIT else "circulant"
    if method == "cholesky":
        vals = _fbm_cholesky(grid, hurst, M, seed, workers)
    elif method == "circulant":
        vals = _fbm_circulant(grid, hurst, M, seed, workers)
    else:
        raise InvalidArgumentError(f"unknown fBm method {method!r}")
    return PathEnsemble(grid, vals[:, :, None], seed=seed, label=f"fbm(H={hurst})")


# ---------------------------------------------------------------------- SDEs

@dataclass(frozen=True)
class SdeSpec:
    """Coefficients of ``dX = drift ds + diffusion dW``.

    Callbacks are vectorized over a batch of states: ``x`` has shape
    ``(B, d)``, ``drift`` returns ``(B, d)``, ``diffusion`` returns
    ``(B, d, m)``.  Scalars and arrays with missing unit axes are broadcast.
    With ``uses_history=True`` the drift is called as
    ``drift(s, x, history)`` where ``history`` is a read-only view of the
    path values up to and including the current step.

    ``drift_dx`` returns the Jacobian ``(B, d, d)`` and ``diffusion_dx``
    returns ``(B, d, m, d)`` with entry ``[b, i, j, k] = d sigma_ij / d x_k``;
    both are needed only by :func:`first_variation`.
    """

    drift: Callable
    diffusion: Callable
    d: int = 1
    m: int = 1
    drift_dx: Optional[Callable] = None
    diffusion_dx: Optional[Callable] = None
    uses_history: bool = False

    def eval_drift(self, s, x, history=None):
        B = x.shape[0]
        out = self.drift(s, x, history) if self.uses_history else self.drift(s, x)
        return coerce(out, (B,), (self.d,))

    def eval_diffusion(self, s, x):
        return coerce(self.diffusion(s, x), (x.shape[0],), (self.d, self.m))


def _em_core(grid: TimeGrid, sde: SdeSpec, x0, dW: np.ndarray) -> np.ndarray:
    B, n = dW.shape[0], grid.n_steps
    d, dt, times = sde.d, grid.dt, grid.times
    X = np.empty((B, n + 1, d))
    X[:, 0] = coerce(x0, (B,), (d,))
    if not np.all(np.isfinite(X[:, 0])):
        raise BlowUpError(0, np.flatnonzero(~np.isfinite(X[:, 0]).all(axis=1)))
    for k in range(n):
        x = X[:, k]
        hist = None
        if sde.uses_history:
            hist = X[:, : k + 1]
            hist.flags.writeable = False
        a = sde.eval_drift(times[k], x, hist)
        sig = sde.eval_diffusion(times[k], x)
        X[:, k + 1] = x + a * dt + np.einsum("bij,bj->bi", sig, dW[:, k])
        if not np.all(np.isfinite(X[:, k + 1])):
            raise BlowUpError(k + 1, np.flatnonzero(~np.isfinite(X[:, k + 1]).all(axis=1)))
    return X


def euler_maruyama(grid: TimeGrid, sde: SdeSpec, x0, noise):
    """Euler-Maruyama scheme driven by an explicit Brownian input.

    ``noise`` (a SamplePath or PathEnsemble of dimension ``sde.m`` on
    ``grid``) is used as given, so the same Brownian motion can drive the
    state, its first variation and any stochastic integral estimator.
    ``x0`` is a state of shape ``(d,)`` or one state per path ``(M, d)``.

    Raises
    ------
    BlowUpError
        If a non-finite state appears; carries the first bad step index.
    """
    g, W = unwrap(noise)
    if g != grid:
        raise InvalidArgumentError("noise grid differs from the simulation grid")
    single = isinstance(noise, SamplePath)
    if single:
        W = W[None]
    if W.shape[-1] != sde.m:
        raise InvalidArgumentError(f"noise has dimension {W.shape[-1]}, sde expects m={sde.m}")
    X = _em_core(grid, sde, x0, np.diff(W, axis=1))
    if single:
        return SamplePath(grid, X[0])
    return PathEnsemble(grid, X, seed=noise.seed, label="euler_maruyama")


def _first_variation_core(grid, sde, X, dW):
    B, n, d = X.shape[0], grid.n_steps, sde.d
    times, dt = grid.times, grid.dt
    Z = np.empty((B, n + 1, d, d))
    Z[:, 0] = np.eye(d)
    for k in range(n):
        x = X[:, k]
        jb = coerce(sde.drift_dx(times[k], x), (B,), (d, d))
        js = coerce(sde.diffusion_dx(times[k], x), (B,), (d, sde.m, d))
        step = jb * dt + np.einsum("bijk,bj->bik", js, dW[:, k])
        Z[:, k + 1] = Z[:, k] + step @ Z[:, k]
        if not np.all(np.isfinite(Z[:, k + 1])):
            raise BlowUpError(k + 1, np.flatnonzero(~np.isfinite(Z[:, k + 1]).reshape(B, -1).all(axis=1)))
    return Z


def first_variation(grid: TimeGrid, sde: SdeSpec, x_path, noise):
    """Derivative of the discretized flow with respect to its initial state.

    Solves ``dZ = Db(s, X) Z ds + sum_j D sigma_j(s, X) Z dW^j`` with
    ``Z_{t0} = I`` on the same grid and noise that produced ``x_path``.
    The result holds ``(d, d)`` matrices at every grid point.
    """
    if sde.drift_dx is None or sde.diffusion_dx is None:
        raise UnsupportedOperationError("first_variation needs drift_dx and diffusion_dx callbacks")
    same_grid(x_path, noise)
    if x_path.grid != grid:
        raise InvalidArgumentError("path grid differs from the requested grid")
    _, X = unwrap(x_path)
    _, W = unwrap(noise)
    single = isinstance(x_path, SamplePath)
    if single:
        X, W = X[None], W[None]
    Z = _first_variation_core(grid, sde, X, np.diff(W, axis=1))
    if single:
        return SamplePath(grid, Z[0])
    return PathEnsemble(grid, Z, seed=x_path.seed, label="first_variation")


# ------------------------------------------------------------------------ IO

_MAGIC = b"DLAB"
_VERSION = 1
_HEADER = struct.Struct("<4sH2xQQQQdd")


def write_csv(ensemble: PathEnsemble, path) -> None:
    """Columnar CSV: ``path_id, step, s, x_1..x_d`` (trailing axes flattened)."""
    vals = ensemble.values.reshape(ensemble.M, ensemble.grid.n_steps + 1, -1)
    M, n1, d = vals.shape
    ids = np.repeat(np.arange(M), n1)
    steps = np.tile(np.arange(n1), M)
    s = np.tile(ensemble.grid.times, M)
    table = np.column_stack([ids, steps, s, vals.reshape(M * n1, d)])
    header = ",".join(["path_id", "step", "s"] + [f"x_{i + 1}" for i in range(d)])
    fmt = ["%d", "%d"] + ["%.17g"] * (d + 1)
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)


def read_csv(path, seed: int = 0, label: str = "") -> PathEnsemble:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ids = table[:, 0].astype(int)
    steps = table[:, 1].astype(int)
    M, n1 = ids.max() + 1, steps.max() + 1
    s = table[:n1, 2]
    grid = make_grid(s[0], s[-1], n1 - 1)
    vals = np.empty((M, n1, table.shape[1] - 3))
    vals[ids, steps] = table[:, 3:]
    return PathEnsemble(grid, vals, seed=seed, label=label)


def write_binary(ensemble: PathEnsemble, path) -> None:
    """Binary dump: header {magic "DLAB", version, M, n_steps, d, seed, t0, T} + float64 data."""
    vals = np.ascontiguousarray(ensemble.values.reshape(ensemble.M, ensemble.grid.n_steps + 1, -1), dtype="<f8")
    g = ensemble.grid
    head = _HEADER.pack(_MAGIC, _VERSION, ensemble.M, g.n_steps, vals.shape[2],
                        ensemble.seed & ((1 << 64) - 1), g.t0, g.T)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(vals.tobytes())


def read_binary(path, label: str = "") -> PathEnsemble:
    raw = Path(path).read_bytes()
    magic, version, M, n, d, seed, t0, T = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise InvalidArgumentError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise InvalidArgumentError(f"unsupported dump version {version}")
    if seed >= 1 << 63:
        seed -= 1 << 64
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(M, n + 1, d)
    return PathEnsemble(TimeGrid(t0, T, n), vals.copy(), seed=seed, label=label)
