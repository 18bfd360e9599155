"""Command-line front end.

    lqmfg {solve,converge,simulate,nashgap,verify,sweep} --config FILE [--out DIR] [--seed U64] [--quiet]

Exit codes: 0 pass, 1 usage/config error, 2 non-solvability, 3 acceptance-band failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .asymptotics import convergence_study, fit_loglog, gain_convergence
from .errors import ConfigError, InvalidModelError, LQMFGError, SolvabilityError
from .finite import (
    check_convexity, closed_loop_gains, open_loop_gains, solve_closed_loop, solve_open_loop,
)
from .game import best_response, evaluate_cost, nash_gap_study, policy_cost, reconstruct_costate, value_function
from .limit import solve_limit
from .model import ModelParams, TimeGrid, load_params, params_from_dict, validate
from .simulation import Policy, PolicyKind, build_policy, mean_field_error, simulate
from .tolerances import merged

EXIT_OK, EXIT_CONFIG, EXIT_SOLVABILITY, EXIT_BAND = 0, 1, 2, 3
COMMANDS = ("solve", "converge", "simulate", "nashgap", "verify", "sweep")
STOCHASTIC = ("simulate", "verify")


@dataclass
class ExperimentConfig:
    model: ModelParams
    grid: TimeGrid
    out: Path
    Ns: list = field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    N: int = 8
    n_paths: int = 2000
    seed: int | None = None
    policies: list = field(default_factory=list)
    kinds: list = field(default_factory=lambda: ["open", "closed"])
    workers: int = 1
    tolerances: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _schema():
    return json.loads(resources.files("lqmfg").joinpath("schemas/experiment.schema.json").read_text())


def _key_line(text, key):
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def load_config(path, command: str, *, out=None, seed=None) -> ExperimentConfig:
    """Parse and validate an experiment config; every failure is a :class:`ConfigError`."""
    import jsonschema

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        where = list(exc.absolute_path)
        key = next((p for p in reversed(where) if isinstance(p, str)), None)
        line = _key_line(text, key) if key else None
        raise ConfigError(f"config schema violation at {'/'.join(map(str, where)) or '<root>'}: {exc.message}",
                          line=line, column=1 if line else None) from None

    model = data["model"]
    try:
        if isinstance(model, str):
            mpath = (path.parent / model) if not Path(model).is_absolute() else Path(model)
            if not mpath.exists():
                raise ConfigError(f"model file {mpath} does not exist", line=_key_line(text, "model"), column=1)
            params = load_params(mpath)
        else:
            params = params_from_dict(model, source_text=text)
    except InvalidModelError as exc:
        raise ConfigError(str(exc)) from None

    grid = TimeGrid(params.T, data.get("grid", {}).get("M", 200))
    Ns = data.get("Ns", [2, 4, 8, 16, 32, 64])
    if Ns != sorted(set(Ns)):
        raise ConfigError("Ns must be strictly increasing", line=_key_line(text, "Ns"), column=1)
    seed = seed if seed is not None else data.get("seed")
    if command in STOCHASTIC and seed is None:
        raise ConfigError(f"command {command!r} needs a seed (config key 'seed' or --seed)")
    try:
        tolerances = merged(data.get("tolerances"))
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), line=_key_line(text, "tolerances"), column=1) from None
    report = validate(params, r_min=tolerances["r_min"])
    if not report.ok:
        raise ConfigError("; ".join(report.failures))
    policies = data.get("policies", ["open", "closed", "decentralized"] if command == "simulate" else ["decentralized"])
    try:
        policies = [PolicyKind.parse(p) for p in policies]
    except ValueError as exc:
        raise ConfigError(str(exc), line=_key_line(text, "policies"), column=1) from None
    out_dir = Path(out) if out is not None else Path(data.get("out", "out"))
    if out is None and not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    return ExperimentConfig(
        model=params, grid=grid, out=out_dir, Ns=Ns, N=data.get("N", 8), n_paths=data.get("n_paths", 2000),
        seed=seed, policies=policies, kinds=data.get("kinds", ["open", "closed"]),
        workers=data.get("workers", 1), tolerances=tolerances, extra=data,
    )


class _Log:
    def __init__(self, quiet):
        self.quiet = quiet

    def __call__(self, *args):
        if not self.quiet:
            print(*args)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------

def cmd_solve(cfg: ExperimentConfig, log) -> int:
    p, g, N, out = cfg.model, cfg.grid, cfg.N, cfg.out
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    verdicts = {}
    for name, solve, gains in (("open", solve_open_loop, open_loop_gains), ("closed", solve_closed_loop, closed_loop_gains)):
        try:
            sol = solve(p, N, g)
        except SolvabilityError as exc:
            log(f"{name}-loop N={N}: non-solvable, escape time t*={exc.escape_time:.6g}")
            verdicts[name] = {"solvable": False, "escape_time": exc.escape_time}
            status = EXIT_SOLVABILITY
            continue
        sol.write_csv(out, f"{name}_N{N}")
        gains(sol, p).write_csv(out, f"{name}_N{N}_gain")
        verdicts[name] = {"solvable": True}
        if name == "closed":
            ok = sol.symmetry_drift <= cfg.tolerances["sym_rel"]
            verdicts[name]["symmetry_drift"] = sol.symmetry_drift
            log(f"closed-loop P1/P3 symmetry check: {'pass' if ok else 'fail'} (max drift {sol.symmetry_drift:.3g})")
            verdicts[name]["value_function"] = value_function(sol, p, N)
        log(f"{name}-loop N={N}: solvable")
    try:
        lim = solve_limit(p, g)
        lim.write_csv(out)
        lim.write_summary_csv(out / "limit_summary.csv")
        verdicts["limit"] = {"solvable": True}
        log("limit: solvable")
    except SolvabilityError as exc:
        log(f"limit: non-solvable, escape time t*={exc.escape_time:.6g}")
        verdicts["limit"] = {"solvable": False, "escape_time": exc.escape_time}
        status = EXIT_SOLVABILITY
    verdicts["pass"] = status == EXIT_OK
    _write_json(out / "solve_verdict.json", verdicts)
    if status == EXIT_SOLVABILITY:
        failed = [k for k, v in verdicts.items() if isinstance(v, dict) and not v["solvable"]]
        print(f"non-solvable: {', '.join(failed)} blew up on the grid", file=sys.stderr)
    return status


def cmd_converge(cfg: ExperimentConfig, log) -> int:
    p, g, out = cfg.model, cfg.grid, cfg.out
    out.mkdir(parents=True, exist_ok=True)
    lim = solve_limit(p, g)
    summary = {}
    ok = True
    for kind in cfg.kinds:
        for level, study in (("riccati", convergence_study), ("gain", gain_convergence)):
            table = study(p, g, cfg.Ns, kind, limit=lim, workers=cfg.workers, tolerances=cfg.tolerances)
            table.write_csv(out / f"converge_{level}_{kind}.csv")
            table.write_verdict(out / f"converge_{level}_{kind}.json")
            summary[f"{level}_{kind}"] = table.to_json()
            log(f"{level:8s} {kind:6s} verdict={table.verdict} "
                + " ".join(f"{k}: slope={f.slope:.4f} r2={f.r2:.4f}" for k, f in table.fits.items()))
            ok = ok and table.passed
    _write_json(out / "converge_verdict.json", {"pass": ok, "studies": summary})
    return EXIT_OK if ok else EXIT_BAND


def cmd_simulate(cfg: ExperimentConfig, log) -> int:
    p, g, out = cfg.model, cfg.grid, cfg.out
    out.mkdir(parents=True, exist_ok=True)
    lim = solve_limit(p, g)
    lo, hi = cfg.tolerances["mean_field_slope_band"]
    verdict = {}
    ok = True
    lines = ["policy,N,sup_mean_sq_gap,stderr"]
    for kind in cfg.policies:
        vals = []
        for N in cfg.Ns:
            res = mean_field_error(p, N, kind, g, cfg.n_paths, cfg.seed, limit=lim, workers=cfg.workers)
            res.write_csv(out / f"meanfield_{kind.value}_N{N}.csv")
            lines.append(f"{kind.value},{N},{res.value:.17g},{res.stderr:.17g}")
            vals.append(res.value)
            log(f"{kind.value:13s} N={N:4d} sup E|xN - xbar|^2 = {res.value:.6g} +- {res.stderr:.2g}")
        fit = fit_loglog(cfg.Ns, vals) if len(vals) >= 2 else None
        passed = fit is not None and lo <= fit.slope <= hi
        verdict[kind.value] = {"slope": fit.slope if fit else None, "r2": fit.r2 if fit else None, "pass": passed}
        ok = ok and passed
    (out / "meanfield_table.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "meanfield_verdict.json", {"pass": ok, "policies": verdict})
    return EXIT_OK if ok else EXIT_BAND


def cmd_nashgap(cfg: ExperimentConfig, log) -> int:
    p, g, out = cfg.model, cfg.grid, cfg.out
    out.mkdir(parents=True, exist_ok=True)
    lim = solve_limit(p, g)
    ok = True
    verdict = {}
    for kind in cfg.policies:
        rep = nash_gap_study(p, g, cfg.Ns, kind, limit=lim, workers=cfg.workers, tolerances=cfg.tolerances)
        rep.write_csv(out / f"nashgap_{kind.value}.csv")
        rep.write_verdict(out / f"nashgap_{kind.value}.json")
        verdict[kind.value] = rep.to_json()
        for r in rep.rows:
            log(f"{kind.value:13s} N={r['N']:4d} J={r['J_policy']:.10g} J*={r['J_star']:.10g} gap={r['gap']:.4g}")
        if rep.fit:
            log(f"slope={rep.fit.slope:.4f} r2={rep.fit.r2:.4f} verdict={rep.verdict}")
        ok = ok and rep.passed
    _write_json(out / "nashgap_verdict.json", {"pass": ok, "policies": verdict})
    return EXIT_OK if ok else EXIT_BAND


def cmd_verify(cfg: ExperimentConfig, log) -> int:
    p, g, out, N = cfg.model, cfg.grid, cfg.out, cfg.N
    out.mkdir(parents=True, exist_ok=True)
    ver = cfg.extra.get("verify", {})
    checks = {}
    # costate identities along simulated paths
    n_small = ver.get("costate_paths", 50)
    for kind, solve, gains in (("open", solve_open_loop, open_loop_gains), ("closed", solve_closed_loop, closed_loop_gains)):
        sol = solve(p, N, g)
        paths = simulate(p, N, Policy.centralized(gains(sol, p), N), g, n_small, cfg.seed,
                         storage="full", workers=cfg.workers)
        try:
            chk = reconstruct_costate(sol, paths, p, player=0, rel_tol=cfg.tolerances["residual_rel"])
            checks[f"costate_{kind}"] = {"residual": chk.residual, "terminal_residual": chk.terminal_residual,
                                         "tolerance": chk.tolerance, "pass": chk.passed}
        except LQMFGError as exc:
            checks[f"costate_{kind}"] = {"residual": getattr(exc, "residual", None), "pass": False}
    # convexity
    cM = ver.get("convexity_M", 50)
    rep = check_convexity(p, N, TimeGrid(p.T, cM), cap=cfg.tolerances["convexity_cap"],
                          rel_tol=cfg.tolerances["convexity_rel"])
    checks["convexity"] = {"min_eigenvalue": rep.min_eigenvalue, "verdict": rep.verdict, "pass": rep.convex}
    # value function against Monte Carlo and exact moment propagation
    vN = ver.get("value_N", 4)
    csol = solve_closed_loop(p, vN, g)
    V = value_function(csol, p, vN, quadrature="simpson")
    pol = Policy.centralized(closed_loop_gains(csol, p), vN)
    exact = policy_cost(p, vN, pol, g)
    paths = simulate(p, vN, pol, g, cfg.n_paths, cfg.seed, workers=cfg.workers)
    est = evaluate_cost(paths, p, 0)
    budget = cfg.tolerances["mc_sigmas"] * est.stderr
    checks["value_function"] = {"V": V, "exact": exact, "mc_mean": est.mean, "mc_stderr": est.stderr,
                                "pass": abs(V - est.mean) <= budget}
    # equilibrium self-test of the closed-loop law
    gap = policy_cost(p, vN, pol, g) - best_response(p, vN, pol, g).cost
    checks["closed_loop_equilibrium"] = {"gap": gap, "pass": abs(gap) <= -cfg.tolerances["nash_gap_floor"]}
    ok = all(c["pass"] for c in checks.values())
    for name, c in checks.items():
        log(f"{name:24s} {'pass' if c['pass'] else 'FAIL'}")
    _write_json(out / "verify_summary.json", {"pass": ok, "checks": checks})
    lines = ["check,pass"] + [f"{k},{int(v['pass'])}" for k, v in checks.items()]
    (out / "verify_summary.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_BAND


def cmd_sweep(cfg: ExperimentConfig, log) -> int:
    """Empirical solvability map: scale one coefficient and record where solves blow up."""
    p, g, out, N = cfg.model, cfg.grid, cfg.out, cfg.N
    out.mkdir(parents=True, exist_ok=True)
    sw = cfg.extra.get("sweep")
    if not sw:
        raise ConfigError("sweep needs a 'sweep' block with 'field' and 'values'")
    name, values = sw["field"], sw["values"]
    if name not in ("A", "G", "Q", "Qf", "Gamma", "Gammaf", "T"):
        raise ConfigError(f"cannot sweep field {name!r}")
    lines = ["# empirical solvability region (blow-up detection on the grid, not a proof)",
             "value,limit_solvable,limit_escape,open_solvable,open_escape,closed_solvable,closed_escape"]
    for val in values:
        if name == "T":
            q = p.replace(T=val)
            grid = TimeGrid(val, g.M)
        else:
            base = getattr(p, name)
            q = p.replace(**{name: val * (base / np.abs(base).max() if np.abs(base).max() > 0 else np.eye(p.n))})
            grid = g
        cells = [format(val, ".17g")]
        for solve in (lambda: solve_limit(q, grid), lambda: solve_open_loop(q, N, grid),
                      lambda: solve_closed_loop(q, N, grid)):
            try:
                solve()
                cells += ["1", ""]
            except SolvabilityError as exc:
                cells += ["0", format(exc.escape_time, ".17g")]
        lines.append(",".join(cells))
        log(f"{name}={val:g}: limit={'ok' if cells[1] == '1' else 'blow-up'}")
    (out / f"sweep_{name}.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


HANDLERS = {"solve": cmd_solve, "converge": cmd_converge, "simulate": cmd_simulate,
            "nashgap": cmd_nashgap, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqmfg", description="LQ mean field game solver and checks")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    log = _Log(args.quiet)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must fit in 64 unsigned bits", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.command, out=args.out, seed=args.seed)
        return HANDLERS[args.command](cfg, log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolvabilityError as exc:
        t = exc.escape_time
        print(f"non-solvable: {exc}" + (f" [escape time {t:.6g}]" if t is not None else ""), file=sys.stderr)
        return EXIT_SOLVABILITY
