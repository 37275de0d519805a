"""Command line entry point.

Exit codes: 0 when every verdict passes, 1 when a check fails or a
numerical error occurs, 2 for usage errors (bad flags, unknown experiment
or problem names, malformed config).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DlabError, InvalidArgumentError
from .experiments import (OUTPUT_ENV, REGISTRY, UsageError, _atomic_write, _csv_text, _plain,
                          list_experiments, make_config, run)
from .functions import catalog
from .fukushima import girsanov_weight, orthogonality_test, ortho_formula, split
from .paths import SdeSpec, euler_maruyama, gen_brownian, make_grid
from .pde import PROBLEMS, McConfig, mild_solve, problem
from .quasi_strong import build_sequence, convergence_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _output_dir(args):
    return args.output_dir or os.environ.get(OUTPUT_ENV)


def _emit(payload, args, name, table=None):
    text = json.dumps(_plain(payload), indent=2, sort_keys=True)
    print(text)
    out = _output_dir(args)
    if out:
        _atomic_write(Path(out) / f"{name}.json", text + "\n")
        if table is not None:
            _atomic_write(Path(out) / f"{name}.csv", _csv_text(*table))


def cmd_list(args):
    for name, desc, tol in list_experiments():
        tol_text = ", ".join(f"{k}={v:g}" for k, v in tol.items())
        print(f"{name:22s} {desc}  [{tol_text}]")
    return EXIT_OK


def cmd_run(args):
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    names = args.experiment or doc.get("experiment")
    if names is None:
        raise UsageError("no experiment named in config or on the command line")
    if names == "all":
        names = list(REGISTRY)
    names = [names] if isinstance(names, str) else list(names)
    section = {k: v for k, v in doc.items() if k != "experiment"}
    configs = [make_config(n, section, seed=args.seed, workers=args.workers,
                           output_dir=_output_dir(args) or doc.get("output_dir") or "dlab_output")
               for n in names]
    ok = True
    for cfg in configs:
        rep = run(cfg)
        status = "PASS" if rep.passed else "FAIL"
        failed = [k for k, v in rep.verdicts.items() if not v]
        print(f"{status} {cfg.experiment} ({rep.timing['wall_clock_s']:.1f}s)"
              + (f" failed: {', '.join(failed)}" if failed else ""))
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_mild(args):
    if len(args.at) < 2:
        raise UsageError("--at needs s followed by the state, e.g. 0,0")
    prob = problem(args.problem, {"d": len(args.at) - 1, "T": args.T})
    mc = McConfig(M=args.paths, n_steps=args.steps, seed=args.seed, workers=args.workers)
    est = mild_solve(prob, args.at[0], args.at[1:], mc)
    _emit({"value": est.value, "stderr": est.stderr,
           "config": {"problem": args.problem, "s": args.at[0], "x": args.at[1:], "T": args.T,
                      "paths": args.paths, "steps": args.steps, "seed": args.seed}}, args, "mild")
    return EXIT_OK


def cmd_quasi_strong(args):
    prob = problem(args.problem, {"T": 1.0})
    K = [[-args.radius, args.radius]]
    times = np.linspace(0.0, 1.0, args.eval_times, endpoint=False)
    pts = np.linspace(-args.radius, args.radius, args.eval_points)
    mc = McConfig(M=args.paths, n_steps=args.steps, seed=args.seed, workers=args.workers)
    seq = build_sequence(prob, args.indices, K, (times, pts), mc)
    rep = convergence_report(seq, prob.h, K, make_grid(0.0, 1.0, 256), args.tol_u, args.tol_h)
    rows = [[n, a, b] for n, a, b in zip(rep.indices, rep.sup_u_err, rep.l1_h_err)]
    _emit(rep.to_dict(), args, "quasi_strong", (["n", "sup_u_err", "l1_h_err"], rows))
    return EXIT_OK if rep.passed else EXIT_FAIL


def _drifted_heat(args):
    grid = make_grid(0.0, 1.0, args.steps)
    W = gen_brownian(grid, 1, args.paths, args.seed, workers=args.workers)
    prob = problem("heat")
    bundle = catalog("heat_solution")
    f = lambda s, x: np.full(x.shape, args.mu)
    S = euler_maruyama(grid, SdeSpec(drift=f, diffusion=prob.sigma), [args.x0], W)
    return grid, W, S, f, prob, bundle


def cmd_decompose(args):
    grid, W, S, f, prob, bundle = _drifted_heat(args)
    dec = split(bundle, S, W, prob)
    form = ortho_formula(bundle, prob, S, f)
    per_path = np.max(np.abs(dec.ortho_part.values - form.values)[..., 0], axis=-1)
    ortho = orthogonality_test(dec.ortho_part, W=W, threshold=args.threshold)
    ok = ortho.passed and float(per_path.mean()) <= args.threshold
    payload = {"closure_residual": dec.closure_residual, "uniqueness_gap": float(per_path.mean()),
               "orthogonality": ortho.to_dict(), "pass": ok,
               "config": {"paths": args.paths, "steps": args.steps, "seed": args.seed, "mu": args.mu}}
    rows = [[i, float(v)] for i, v in enumerate(per_path)]
    _emit(payload, args, "decompose", (["path_id", "sup_split_minus_formula"], rows))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_girsanov(args):
    grid, W, S, f, prob, bundle = _drifted_heat(args)
    rep = girsanov_weight(S, W, prob, f, bundle=bundle)
    payload = rep.to_dict()
    payload["config"] = {"paths": args.paths, "steps": args.steps, "seed": args.seed, "mu": args.mu}
    _emit(payload, args, "girsanov")
    return EXIT_OK if rep.passed and rep.routes_agree else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlab", description="Seeded numerical experiments on "
                                "forward integrals, Ito formulas and mild solutions.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list registered experiments").set_defaults(func=cmd_list)

    r = sub.add_parser("run", help="run experiments from a JSON config")
    r.add_argument("config", help="JSON config file")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--experiment", action="append", help="override the config's experiment (repeatable)")
    r.add_argument("--output-dir", help=f"report directory (default: ${OUTPUT_ENV} or ./dlab_output)")
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_run)

    def common(sp, paths, steps):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--paths", type=int, default=paths)
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--output-dir")

    m = sub.add_parser("mild", help="Feynman-Kac estimate of a catalog problem")
    m.add_argument("--problem", choices=PROBLEMS, required=True)
    m.add_argument("--at", type=_floats, required=True, help="s,x1[,x2,...]")
    m.add_argument("--T", type=float, default=1.0)
    common(m, 10_000, 256)
    m.set_defaults(func=cmd_mild)

    q = sub.add_parser("quasi-strong", help="truncation-mollification ladder")
    q.add_argument("--problem", choices=PROBLEMS, default="abs_source")
    q.add_argument("--indices", type=_ints, default=[2, 4, 8, 16])
    q.add_argument("--radius", type=float, default=2.0)
    q.add_argument("--eval-times", type=int, default=4)
    q.add_argument("--eval-points", type=int, default=9)
    q.add_argument("--tol-u", type=float, default=0.05)
    q.add_argument("--tol-h", type=float, default=0.05)
    common(q, 2000, 128)
    q.set_defaults(func=cmd_quasi_strong)

    for name, helptext, func, paths, steps in (
            ("decompose", "decomposition of u(s,S_s) for the drifted heat problem", cmd_decompose, 256, 4096),
            ("girsanov", "change of measure for the drifted heat problem", cmd_girsanov, 4096, 1024)):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--mu", type=float, default=0.5)
        sp.add_argument("--x0", type=float, default=0.0)
        sp.add_argument("--threshold", type=float, default=0.05)
        common(sp, paths, steps)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
