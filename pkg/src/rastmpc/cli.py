"""rastmpc command line: plan, simulate, montecarlo, verify, replay.

Exit codes: 0 success, 2 usage or scenario parse error, 3 solver failure,
4 verification failure.  Every invocation writes ``manifest.json`` to the
output directory (``--out-dir``, else ``$RASTMPC_OUT_DIR``, else
``./rastmpc-out``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .closedloop import ClosedLoopOptions, monte_carlo, run_closed_loop, make_rng
from .model import GaussianBelief, ScenarioError, resolve_scenario_path, scenario_from_dict
from .nlpsolve.sqp import CONVERGED, SolveOptions, solve
from .transcription import extract_plan, transcribe

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "RASTMPC_OUT_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or "rastmpc-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, record: dict):
    """Scenario with command-line overrides applied before parsing (flag > file > default)."""
    try:
        path = resolve_scenario_path(args.scenario)
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise ScenarioError("top level must be an object")
        for flag, key in (("horizon", "horizon"), ("t_end", "t_end"), ("seed", "seed")):
            if getattr(args, flag, None) is not None:
                data[key] = getattr(args, flag)
        sc = scenario_from_dict(data)
    except (ScenarioError, OSError, ValueError) as exc:
        raise CliError(f"cannot load scenario {args.scenario!r}: {exc}", EXIT_USAGE) from exc
    record["scenario"] = str(path)
    record["seed"] = sc.seed
    return sc


def _overrides(args) -> dict:
    keys = ("horizon", "t_end", "seed", "samples", "workers", "n")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n")


def cmd_plan(args, out: Path, record: dict) -> int:
    sc = _load(args, record)
    stochastic = not (sc.model.noiseless and not sc.tightening)
    prob, layout = transcribe(sc, GaussianBelief.exact(sc.x0), sc.resource.r0, 0.0, stochastic=stochastic)
    so = sc.options
    res = solve(prob, prob.context.initial_guess(),
                SolveOptions(max_iter=so.max_iter, tol=so.tol, constraint_tol=so.constraint_tol))
    diag = {"status": res.status, "iterations": res.iterations, "objective": res.objective,
            "kkt_residual": res.kkt_residual, "constraint_residual": res.constraint_residual,
            "complementarity": res.complementarity}
    record["solver"] = diag
    if res.status != CONVERGED:
        _dump(out / "plan.json", {"diagnostics": diag})
        raise CliError(f"solver did not converge: {res.status}", EXIT_SOLVER)
    pred = extract_plan(layout, res.z, sc)
    plan = pred.plan
    _dump(out / "plan.json", {
        "scenario": sc.name,
        "horizon": layout.N,
        "stochastic": stochastic,
        "v": plan.v.tolist(),
        "K": plan.K.tolist(),
        "delta": plan.schedule.deltas.tolist(),
        "trigger_times": pred.trigger_times.tolist(),
        "resource": [sc.resource.r0] + pred.resource.tolist(),
        "prediction": {
            "t": pred.times.tolist(),
            "mean": [b.mu.tolist() for b in pred.beliefs],
            "cov": [b.P.tolist() for b in pred.beliefs],
        },
        "diagnostics": diag,
    })
    print(f"plan: {res.status} in {res.iterations} iterations, objective {res.objective:.6g}")
    return EXIT_OK


def _loop_options(sc) -> ClosedLoopOptions:
    return ClosedLoopOptions(t_end=sc.t_end, horizon=sc.horizon_n)


def cmd_simulate(args, out: Path, record: dict) -> int:
    sc = _load(args, record)
    log = run_closed_loop(sc, make_rng(sc.seed), _loop_options(sc))
    log.to_csv(out / "trajectory.csv")
    log.to_json(out / "trajectory.json")
    fallbacks = sum(s.startswith("fallback") for s in log.statuses)
    record["triggers"] = len(log.triggers)
    record["fallbacks"] = fallbacks
    if fallbacks:
        print(f"warning: {fallbacks} of {len(log.triggers)} triggers used the fallback plan", file=sys.stderr)
    print(f"simulate: {len(log.triggers)} triggers over {sc.t_end:g} s -> {out / 'trajectory.csv'}")
    return EXIT_OK


def cmd_montecarlo(args, out: Path, record: dict) -> int:
    sc = _load(args, record)
    if args.samples < 1:
        raise CliError("--samples must be >= 1", EXIT_USAGE)
    try:
        stats, logs = monte_carlo(sc, args.samples, base_seed=sc.seed, opts=_loop_options(sc),
                                  workers=args.workers)
    except RuntimeError as exc:  # every sample failed
        raise CliError(str(exc), EXIT_SOLVER) from exc
    width = len(str(args.samples - 1))
    done = {f["sample"] for f in stats.failures}
    for i, log in zip([i for i in range(args.samples) if i not in done], logs):
        log.to_csv(out / f"sample_{i:0{width}d}.csv")
    _dump(out / "stats.json", stats.to_dict())
    record["failures"] = stats.failures
    record["max_violation"] = stats.max_violation
    for name, freq in stats.max_violation.items():
        print(f"{name}: max violation frequency {freq:.4f}")
    if stats.failures:
        print(f"warning: {len(stats.failures)} samples failed", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args, out: Path, record: dict) -> int:
    from .verify import run_suite

    kw = {}
    if args.suite == "decomposition" and args.n is not None:
        kw["n"] = args.n
    if args.suite in ("montecarlo", "chance") and args.samples is not None:
        kw["samples"] = args.samples
    try:
        reports = run_suite(args.suite, **kw)
    except KeyError as exc:
        raise CliError(str(exc.args[0]), EXIT_USAGE) from exc
    for rep in reports:
        print(rep.line())
    _dump(out / "verify.json", [r.to_dict() for r in reports])
    record["verify"] = {r.name: r.passed for r in reports}
    failed = [r for r in reports if not r.passed]
    if failed:
        first = failed[0]
        print(f"first failure: {first.name}; instance: {json.dumps(first.instance)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_replay(args, out: Path, record: dict) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read manifest {args.manifest!r}: {exc}", EXIT_USAGE) from exc
    if argv and argv[0] == "replay":
        raise CliError("refusing to replay a replay", EXIT_USAGE)
    code, inner = _run(_strip_out_dir(argv) + ["--out-dir", str(out)])
    record["replayed"] = inner
    return code


def _strip_out_dir(argv: list) -> list:
    kept, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out-dir":
            skip = True
            continue
        if tok.startswith("--out-dir="):
            continue
        kept.append(tok)
    return kept


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rastmpc", description="Resource-aware stochastic self-triggered MPC.")
    p.add_argument("--version", action="version", version=f"rastmpc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
        sp.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or ./rastmpc-out)")

    sp = sub.add_parser("plan", help="solve one optimal control problem from the initial state")
    common(sp)
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="one closed-loop run, written as CSV")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("montecarlo", help="independent closed-loop samples and ensemble statistics")
    common(sp)
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--seed", type=int, help="base seed; sample i uses seed + i")
    sp.add_argument("--t-end", type=float)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("verify", help="oracle suites")
    sp.add_argument("suite", nargs="?", default="all",
                    help="covprop, decomposition, quantile, firstinterval, chance, montecarlo or all")
    sp.add_argument("--n", type=int, help="largest horizon for the decomposition suite")
    sp.add_argument("--samples", type=int)
    common(sp, scenario=False)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("replay", help="re-run the invocation recorded in a manifest")
    sp.add_argument("manifest")
    common(sp, scenario=False)
    sp.set_defaults(func=cmd_replay)
    return p


def _run(argv: list):
    """Parse and execute; returns (exit code, manifest record)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0), None
    out = _out_dir(args)
    record = {"command": args.command, "argv": argv, "version": __version__,
              "out_dir": str(out), "overrides": _overrides(args)}
    start = time.perf_counter()
    try:
        code = args.func(args, out, record)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = exc.code
    record["exit_code"] = code
    record["wall_time_s"] = time.perf_counter() - start
    return code, record


def main(argv=None) -> int:
    code, record = _run(list(sys.argv[1:] if argv is None else argv))
    if record is not None:
        _dump(Path(record["out_dir"]) / "manifest.json", record)
    return code


if __name__ == "__main__":
    sys.exit(main())
