"""Registry of named, seeded experiments with CSV/JSON reports.

Every experiment reads an :class:`ExperimentConfig`, returns metrics and
pass/fail verdicts, and writes ``<name>.json`` and ``<name>.csv`` atomically
into the output directory.  Wall-clock time is reported under a separate
``timing`` key so the rest of the report is reproducible bit for bit from
``(config, seed)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError
from .functions import catalog
from .fukushima import chain_rule_check, girsanov_weight, orthogonality_test, ortho_formula, split
from .ito import ito_residual
from .paths import SdeSpec, euler_maruyama, gen_brownian, gen_fbm, make_grid, unwrap
from .pde import (ORACLE_PROBLEMS, McConfig, exact_pairs, fd_gradient, mild_grad, mild_solve,
                  oracle_solution, problem, quasi_strict_residual)
from .quasi_strong import build_sequence, convergence_report
from .regularization import EpsSchedule, bracket_eps, forward_integral_eps, limit_estimate

SCHEMA_VERSION = 1
SCHEMA_PATH = Path(__file__).with_name("run_report.schema.json")
OUTPUT_ENV = "DLAB_OUTPUT_DIR"


class UsageError(InvalidArgumentError):
    """Configuration refers to something that does not exist (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    grid: dict = field(default_factory=lambda: {"t0": 0.0, "T": 1.0, "n_steps": 4096})
    mc: McConfig = field(default_factory=McConfig)
    eps_multiples: tuple = (64, 32, 16, 8, 4)
    problem: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output_dir: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.mc.seed

    def time_grid(self):
        return make_grid(self.grid["t0"], self.grid["T"], self.grid["n_steps"])

    def schedule(self) -> EpsSchedule:
        return EpsSchedule(tuple(self.eps_multiples))

    def to_dict(self) -> dict:
        out = {"experiment": self.experiment, "grid": dict(self.grid), "mc": asdict(self.mc),
               "eps_multiples": list(self.eps_multiples), "problem": _plain(self.problem),
               "tolerances": dict(self.tolerances)}
        out["mc"].pop("workers")
        return out


@dataclass
class RunReport:
    experiment: str
    seed: int
    config: dict
    metrics: dict
    verdicts: dict
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "experiment": self.experiment, "seed": self.seed,
                "config": self.config, "metrics": _plain(self.metrics),
                "verdicts": {k: bool(v) for k, v in self.verdicts.items()}, "pass": self.passed,
                "timing": self.timing}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def deterministic_part(self) -> dict:
        d = self.to_dict()
        d.pop("timing")
        return d


def _plain(v):
    """Convert numpy scalars/arrays to JSON-safe Python values (non-finite -> None)."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


# ------------------------------------------------------------------ runners

def _brownian(cfg, dim=1):
    grid = cfg.time_grid()
    return grid, gen_brownian(grid, dim, cfg.mc.M, cfg.seed, workers=cfg.mc.workers)


def _ladder_table(rep):
    rows = []
    for j, e in enumerate(rep.eps):
        gap = rep.gaps[j - 1] if j else float("nan")
        se = float(rep.stderr[j]) if rep.stderr is not None else float("nan")
        rows.append([e, float(rep.estimates[j]), se, gap])
    return ["eps", "estimate", "stderr", "gap_from_previous"], rows


def _run_bracket_bm(cfg):
    grid, W = _brownian(cfg)
    rep = limit_estimate(lambda e: bracket_eps(W, W, e).values[:, -1, 0, 0], cfg.schedule(), grid.dt,
                         cfg.tolerances["limit_abs"], ensemble=True, target=1.0)
    metrics = {"limit": rep.limit, "limit_stderr": rep.limit_stderr, "estimates": rep.estimates,
               "gaps": rep.gaps, "rate": rep.rate}
    verdicts = {"limit_close_to_one": abs(float(rep.limit) - 1.0) <= cfg.tolerances["limit_abs"],
                "decay_monotone": rep.monotone}
    return metrics, verdicts, _ladder_table(rep)


def _run_bracket_fbm(cfg):
    grid = cfg.time_grid()
    H = float(cfg.problem.get("hurst", 0.75))
    B = gen_fbm(grid, H, cfg.mc.M, cfg.seed, workers=cfg.mc.workers)
    rep = limit_estimate(lambda e: bracket_eps(B, B, e).values[:, -1, 0, 0], cfg.schedule(), grid.dt,
                         cfg.tolerances["limit_max"], ensemble=True, target=0.0)
    est = [float(v) for v in rep.estimates]
    metrics = {"hurst": H, "limit": rep.limit, "estimates": est, "gaps": rep.gaps, "rate": rep.rate}
    verdicts = {"limit_below_tol": float(rep.limit) <= cfg.tolerances["limit_max"],
                "decaying": all(b < a for a, b in zip(est, est[1:]))}
    return metrics, verdicts, _ladder_table(rep)


def _run_forward_vs_ito(cfg):
    grid, W = _brownian(cfg)
    eps = cfg.eps_multiples[-1] * grid.dt
    fwd = forward_integral_eps(W, W, eps).values[:, -1, 0]
    wT = W.values[:, -1, 0]
    err = fwd - 0.5 * (wT ** 2 - (grid.T - grid.t0))
    rms = float(np.sqrt(np.mean(err ** 2)))
    rows = [[i, float(fwd[i]), float(err[i])] for i in range(len(err))]
    return ({"eps": eps, "rms": rms, "max_abs": float(np.max(np.abs(err)))},
            {"rms_within_tol": rms <= cfg.tolerances["rms"]},
            (["path_id", "forward_integral_T", "error"], rows))


def _run_ito_c02ac(cfg):
    grid, W = _brownian(cfg)
    params = dict(cfg.problem)
    bundle = catalog(params.pop("function", "kink_time_quadratic"), params)
    rep = ito_residual(bundle, W, cfg.schedule(), cfg.tolerances["residual"])
    est = [float(v) for v in rep.estimates]
    verdicts = {"residual_within_tol": est[-1] <= cfg.tolerances["residual"],
                "smaller_than_coarsest": est[-1] < est[0]}
    return {"estimates": est, "stderr": rep.stderr, "gaps": rep.gaps, "rate": rep.rate}, verdicts, \
        _ladder_table(rep)


def _random_points(seed, count, T):
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 6])
    return [(float(rng.uniform(0.0, 0.9 * T)), float(rng.uniform(-1.5, 1.5))) for _ in range(count)]


def _run_mild_oracles(cfg):
    tol = cfg.tolerances
    T = cfg.grid["T"]
    metrics, verdicts, rows = {"oracles": {}, "exact": {}}, {}, []
    starts = {"heat_quadratic": (0.0, 0.0), "constant_source": (0.25, 0.3), "ou_linear": (0.0, 2.0)}
    for name, (s, x) in starts.items():
        prob = problem(ORACLE_PROBLEMS[name], {"T": T})
        est = mild_solve(prob, s, [x], cfg.mc)
        exact = oracle_solution(name, {"T": T}, s, x)
        err = abs(est.value - exact)
        metrics["oracles"][name] = {"s": s, "x": x, "value": est.value, "stderr": est.stderr, "exact": exact}
        verdicts[f"oracle_{name}"] = err <= 3 * est.stderr + tol["mc_abs"]
        rows.append([name, s, x, est.value, est.stderr, exact])
    mc_exact = McConfig(M=int(cfg.problem.get("exact_paths", 20000)), n_steps=cfg.mc.n_steps,
                        seed=cfg.seed, block=cfg.mc.block, workers=cfg.mc.workers)
    qgrid = make_grid(0.0, T, cfg.mc.n_steps)
    pts = _random_points(cfg.seed, int(cfg.problem.get("exact_points", 5)), T)
    for prob, bundle in exact_pairs({"T": T}):
        res = quasi_strict_residual(bundle, prob, np.array([[x] for _, x in pts]), qgrid)
        entry = {"quasi_strict_residual": res, "points": []}
        ok = True
        for s, x in pts:
            est = mild_solve(prob, s, [x], mc_exact)
            exact = float(bundle.value(s, np.array([x])))
            entry["points"].append({"s": s, "x": x, "value": est.value, "stderr": est.stderr, "exact": exact})
            ok &= abs(est.value - exact) <= 3 * est.stderr + tol["mc_abs"]
            rows.append([prob.name, s, x, est.value, est.stderr, exact])
        metrics["exact"][prob.name] = entry
        verdicts[f"quasi_strict_{prob.name}"] = res <= tol["quasi_strict"]
        verdicts[f"mild_matches_{prob.name}"] = ok
    return metrics, verdicts, (["case", "s", "x", "value", "stderr", "exact"], rows)


def _run_mild_grad(cfg):
    tol = cfg.tolerances
    T = cfg.grid["T"]
    metrics, verdicts, rows = {}, {}, []
    cases = {"heat": [(0.2, 0.7), (0.5, -1.0)], "ou": [(0.2, 0.7), (0.0, 2.0)]}
    for name, pts in cases.items():
        prob = problem(name, {"T": T})
        ok, out = True, []
        for s, x in pts:
            g = mild_grad(prob, s, [x], cfg.mc)
            fd = fd_gradient(prob, s, [x], cfg.mc, step=float(cfg.problem.get("fd_step", 1e-2)))
            comb = math.hypot(float(g.stderr[0]), float(fd.stderr[0]))
            diff = abs(float(g.value[0]) - float(fd.value[0]))
            ok &= diff <= 3 * comb + tol["grad_abs"]
            out.append({"s": s, "x": x, "grad": g.value, "grad_stderr": g.stderr,
                        "fd": fd.value, "fd_stderr": fd.stderr})
            rows.append([name, s, x, float(g.value[0]), float(g.stderr[0]), float(fd.value[0]),
                         float(fd.stderr[0])])
        metrics[name] = out
        verdicts[f"grad_matches_fd_{name}"] = ok
    return metrics, verdicts, (["problem", "s", "x", "grad", "grad_stderr", "fd", "fd_stderr"], rows)


def _run_quasi_strong(cfg):
    p = cfg.problem
    T = cfg.grid["T"]
    prob = problem(p.get("name", "abs_source"), {"T": T})
    K = [[-2.0, 2.0]] if "K" not in p else p["K"]
    indices = list(p.get("indices", (2, 4, 8, 16)))
    times = np.linspace(0.0, T, int(p.get("eval_times", 4)), endpoint=False)
    pts = np.linspace(K[0][0], K[0][1], int(p.get("eval_points", 9)))
    seq = build_sequence(prob, indices, K, (times, pts), cfg.mc)
    rep = convergence_report(seq, prob.h, K, make_grid(0.0, T, 256), cfg.tolerances["sup_u"],
                             cfg.tolerances["l1_h"])
    su, lh = rep.sup_u_err, rep.l1_h_err
    verdicts = {"sup_u_decreasing": all(b < a for a, b in zip(su, su[1:])),
                "l1_h_decreasing": all(b < a for a, b in zip(lh, lh[1:])),
                "sup_u_final_within_tol": su[-1] <= cfg.tolerances["sup_u"],
                "l1_h_final_within_tol": lh[-1] <= cfg.tolerances["l1_h"]}
    rows = [[n, a, b] for n, a, b in zip(indices, su, lh)]
    return rep.to_dict(), verdicts, (["n", "sup_u_err", "l1_h_err"], rows)


def _drifted_heat(cfg):
    grid, W = _brownian(cfg)
    mu = float(cfg.problem.get("mu", 0.5))
    prob = problem("heat", {"T": grid.T})
    bundle = catalog("heat_solution", {"T": grid.T})
    f = lambda s, x: np.full(x.shape, mu)
    S = euler_maruyama(grid, SdeSpec(drift=f, diffusion=prob.sigma), [float(cfg.problem.get("x0", 0.0))], W)
    return grid, W, S, f, prob, bundle


def _run_chain_rule(cfg):
    grid, W, S, f, prob, bundle = _drifted_heat(cfg)
    tol = cfg.tolerances
    rep = chain_rule_check(bundle, prob, S, W, f, tol=tol["residual"])
    neg = chain_rule_check(bundle, prob, S, W, f, tol=tol["residual"], h_shift=1.0)
    dec = split(bundle, S, W, prob)
    form = ortho_formula(bundle, prob, S, f)
    per_path = np.max(np.abs(dec.ortho_part.values - form.values)[..., 0], axis=-1)
    uniq = float(np.mean(per_path))
    est = [float(v) for v in rep.estimates]
    metrics = {"residual_by_coarsening": est, "negative_control": [float(v) for v in neg.estimates],
               "uniqueness_gap": uniq, "closure_residual": dec.closure_residual}
    verdicts = {"chain_rule_within_tol": est[-1] <= tol["residual"],
                "negative_control_detected": float(neg.estimates[-1]) >= tol["negative_min"],
                "uniqueness_within_tol": uniq <= tol["uniqueness"]}
    rows = [[i, float(per_path[i])] for i in range(len(per_path))]
    return metrics, verdicts, (["path_id", "sup_split_minus_formula"], rows)


def _run_orthogonality(cfg):
    grid, W, S, f, prob, bundle = _drifted_heat(cfg)
    thr = cfg.tolerances["threshold"]
    dec = split(bundle, S, W, prob)
    rep = orthogonality_test(dec.ortho_part, schedule=cfg.schedule(), threshold=thr, W=W)
    neg = orthogonality_test(W, battery=[("W1", W)], schedule=cfg.schedule(), threshold=thr)
    neg_stat = neg.per_martingale[0]["statistic"]
    metrics = {"battery": rep.per_martingale, "negative_control": neg.per_martingale}
    verdicts = {"ortho_part_passes": rep.passed, "negative_control_fails": not neg.passed,
                "negative_control_near_T": abs(neg_stat - (grid.T - grid.t0)) <= cfg.tolerances["negative_abs"]}
    rows = [[e["label"], j, v] for e in rep.per_martingale + neg.per_martingale for j, v in enumerate(e["by_eps"])]
    return metrics, verdicts, (["martingale", "eps_index", "statistic"], rows)


def _run_girsanov(cfg):
    grid, W, S, f, prob, bundle = _drifted_heat(cfg)
    rep = girsanov_weight(S, W, prob, f, bundle=bundle, route_tol=cfg.tolerances["route_abs"])
    z = rep.z_terminal_mean
    metrics = rep.to_dict()
    verdicts = {"z_mean_near_one": abs(z.value - 1.0) <= 3 * z.stderr,
                "routes_agree": bool(rep.routes_agree)}
    rows = [["direct", rep.direct_route.value, rep.direct_route.stderr],
            ["girsanov", rep.girsanov_route.value, rep.girsanov_route.stderr],
            ["z_terminal", z.value, z.stderr]]
    return metrics, verdicts, (["quantity", "value", "stderr"], rows)


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    runner: Callable
    tolerances: dict
    defaults: dict


def _exp(name, description, runner, tolerances, **defaults):
    return Experiment(name, description, runner, tolerances, defaults)


REGISTRY = {e.name: e for e in [
    _exp("bracket-bm", "eps-bracket [W,W](T) of Brownian motion tends to T", _run_bracket_bm,
         {"limit_abs": 0.02}, n_steps=4096, M=256),
    _exp("bracket-fbm", "eps-bracket of fractional Brownian motion (H = 0.75) tends to 0",
         _run_bracket_fbm, {"limit_max": 0.02}, n_steps=2 ** 14, M=256, problem={"hurst": 0.75}),
    _exp("forward-vs-ito", "forward integral of W against W equals (W_T^2 - T)/2",
         _run_forward_vs_ito, {"rms": 0.05}, n_steps=4096, M=256),
    _exp("ito-c02ac", "Ito formula residual for |s - 1/2| x^2 along Brownian paths", _run_ito_c02ac,
         {"residual": 0.05}, n_steps=4096, M=256, problem={"function": "kink_time_quadratic", "c": 0.5}),
    _exp("mild-oracles", "Feynman-Kac mild solutions against closed forms and quasi-strict solutions",
         _run_mild_oracles, {"mc_abs": 0.01, "quasi_strict": 1e-4}, M=100_000, mc_steps=1024,
         problem={"exact_paths": 20_000, "exact_points": 5}),
    _exp("mild-grad", "first-variation gradients against finite differences of mild solutions",
         _run_mild_grad, {"grad_abs": 0.01}, M=20_000, mc_steps=256, problem={"fd_step": 0.01}),
    _exp("quasi-strong-ladder", "truncated and mollified sources |x|: errors decrease in n",
         _run_quasi_strong, {"sup_u": 0.05, "l1_h": 0.05}, M=2000, mc_steps=128,
         problem={"name": "abs_source", "indices": [2, 4, 8, 16], "K": [[-2.0, 2.0]],
                  "eval_times": 4, "eval_points": 9}),
    _exp("chain-rule", "decomposition of u(s,S_s) for the drifted heat problem, with negative control",
         _run_chain_rule, {"residual": 0.05, "negative_min": 0.5, "uniqueness": 0.05},
         n_steps=4096, M=256, problem={"mu": 0.5, "x0": 0.0}),
    _exp("orthogonality", "covariation of the orthogonal part with a martingale battery",
         _run_orthogonality, {"threshold": 0.05, "negative_abs": 0.1}, n_steps=4096, M=256,
         problem={"mu": 0.5, "x0": 0.0}),
    _exp("girsanov", "exponential martingale weights and the change-of-measure route",
         _run_girsanov, {"route_abs": 0.05}, n_steps=1024, M=4096, problem={"mu": 0.5, "x0": 0.0}),
]}


def list_experiments():
    """``(name, description, default tolerances)`` for every registered experiment."""
    return [(e.name, e.description, dict(e.tolerances)) for e in REGISTRY.values()]


_CONFIG_KEYS = {"experiment", "grid", "mc", "eps_multiples", "problem", "tolerances", "output_dir", "seed"}


def make_config(experiment: str, overrides: Optional[dict] = None, seed: Optional[int] = None,
                workers: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Registry defaults for ``experiment`` updated with ``overrides`` then explicit arguments."""
    if experiment not in REGISTRY:
        raise UsageError(f"unknown experiment {experiment!r}; see `list`")
    ov = dict(overrides or {})
    unknown = set(ov) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    e = REGISTRY[experiment]
    dflt = e.defaults
    grid = {"t0": 0.0, "T": 1.0, "n_steps": dflt.get("n_steps", 4096)}
    grid.update(ov.get("grid", {}))
    mc = {"M": dflt.get("M", 256), "n_steps": dflt.get("mc_steps", 256), "seed": 0}
    if "seed" in ov:
        mc["seed"] = ov["seed"]
    mc.update(ov.get("mc", {}))
    if seed is not None:
        mc["seed"] = seed
    if workers is not None:
        mc["workers"] = workers
    unknown_tol = set(ov.get("tolerances", {})) - set(e.tolerances)
    if unknown_tol:
        raise UsageError(f"unknown tolerances for {experiment}: {sorted(unknown_tol)}")
    tol = dict(e.tolerances)
    tol.update(ov.get("tolerances", {}))
    if any(not (isinstance(v, (int, float)) and v > 0) for v in tol.values()):
        raise InvalidArgumentError("tolerances must be positive numbers")
    prob = dict(dflt.get("problem", {}))
    prob.update(ov.get("problem", {}))
    try:
        mc_cfg = McConfig(**mc)
    except TypeError as exc:
        raise UsageError(f"bad mc section: {exc}") from None
    cfg = ExperimentConfig(experiment=experiment, grid=grid, mc=mc_cfg,
                           eps_multiples=tuple(ov.get("eps_multiples", (64, 32, 16, 8, 4))),
                           problem=prob, tolerances=tol,
                           output_dir=output_dir or ov.get("output_dir"))
    cfg.time_grid()
    cfg.schedule()
    return cfg


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def run(config: ExperimentConfig, write: bool = True) -> RunReport:
    """Execute one experiment; write ``<name>.json`` / ``<name>.csv`` if an output dir is set."""
    if config.experiment not in REGISTRY:
        raise UsageError(f"unknown experiment {config.experiment!r}")
    t0 = time.perf_counter()
    metrics, verdicts, (header, rows) = REGISTRY[config.experiment].runner(config)
    elapsed = time.perf_counter() - t0
    report = RunReport(experiment=config.experiment, seed=config.seed, config=config.to_dict(),
                       metrics=_plain(metrics), verdicts={k: bool(v) for k, v in verdicts.items()},
                       timing={"wall_clock_s": elapsed})
    out = config.output_dir or os.environ.get(OUTPUT_ENV)
    if write and out:
        out = Path(out)
        _atomic_write(out / f"{config.experiment}.json", report.to_json() + "\n")
        _atomic_write(out / f"{config.experiment}.csv", _csv_text(header, rows))
    return report


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())
