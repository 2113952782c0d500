"""Command-line entry point.

Every subcommand reads one configuration (``--config file.json`` or
``--preset name``), writes CSV outputs with 17 significant digits plus a
``manifest.json`` into ``--out-dir``, and exits with

====  =====================================================
code  meaning
====  =====================================================
0     ran, every check passed
1     ran, a check failed (report written)
2     configuration error (message names the field path)
3     numerical error (unstable step, CFL, non-finite value)
4     other model error (unsupported variant, off-domain, ...)
====  =====================================================
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfg
from .conjugate import fenchel_numeric
from .controls import ConstantSelector, constant_control
from .model import GridSpec
from .errors import CheckFailure, ConfigError, ModelError, NumericalError
from .pde import compare_fields, residual_check, solve_semilinear
from .procedure import (ProcedureEngine, backward_induction, check_axioms, check_feller_modulus,
                        check_penalty_cocycle, random_payoff_pairs, relative_error,
                        time_consistency_all)
from .simulate import martingale_defect, moment_bound_check, moment_constant, simulate_paths
from .stochvol import (ask_convexity, c_sweep, price_bid_ask, pricing_problem, s_martingale_test,
                       strike_curve)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MODEL = 0, 1, 2, 3, 4
EXIT_CODES = {
    EXIT_OK: "ok",
    EXIT_CHECK: "check failed",
    EXIT_CONFIG: "configuration error",
    EXIT_NUMERICAL: "numerical error",
    EXIT_MODEL: "model error",
}
FLOAT_FMT = "%.17g"


class Run:
    """Output directory, check ledger and timings for one invocation."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs = {}
        self.checks = {}
        self.timings = {}

    def csv(self, name, header, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        path = self.out_dir / name
        np.savetxt(path, rows, fmt=FLOAT_FMT, delimiter=",", header=",".join(header),
                   comments="")
        self.outputs[name] = _sha256(path)

    def json(self, name, obj):
        path = self.out_dir / name
        path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
        self.outputs[name] = _sha256(path)

    def check(self, name, passed, **detail):
        self.checks[name] = {"passed": bool(passed), **_plain(detail)}

    def timed(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = time.perf_counter() - t0
        return out

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _plain(obj):
    """JSON-ready copy with rounding-stable float text."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(FLOAT_FMT % obj)
    return obj


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("convexfeller", "artifact", "numpy", "scipy", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    return out


def _field_rows(grid, values, argmax=None):
    """Rows ``t, x_1..x_n, v[, lam_1..lam_d]`` for every slice and node."""
    nt1, N = values.shape
    T = np.repeat(grid.times, N)[:, None]
    X = np.tile(grid.nodes, (nt1, 1))
    cols = [T, X, values.reshape(-1, 1)]
    if argmax is not None:
        lam = np.asarray(argmax)
        lam = np.concatenate([lam, np.full((1,) + lam.shape[1:], np.nan)], axis=0)
        cols.append(lam.reshape(nt1 * N, -1))
    return np.hstack(cols)


def _field_header(grid, values_name, control_dim=0):
    head = ["t"] + [f"x{i + 1}" for i in range(grid.dim)] + [values_name]
    return head + [f"lam{i + 1}" for i in range(control_dim)]


def _require_diffusion(exp, command):
    if exp.is_market:
        raise ConfigError(f"{command} needs a diffusion experiment, not a market", "market")


def _require_market(exp, command):
    if not exp.is_market:
        raise ConfigError(f"{command} needs a market experiment", "market")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_conjugate(exp, run, args):
    """Numeric conjugate on a 41-point z grid at the box centre, against the
    closed form when one exists."""
    _require_diffusion(exp, "conjugate")
    grid = exp.grid
    x = 0.5 * (grid.lo + grid.hi)
    d = exp.control_set.dim
    zs = np.linspace(-2.0, 2.0, 41)
    closed = exp.generator()
    rows = []
    for z1 in zs:
        z = np.zeros(d)
        z[0] = z1
        num = fenchel_numeric(exp.penalty, exp.control_set, grid.t0, x, z, resolution=200, depth=8)
        ref = closed(grid.t0, x[None], z[None])[0][0]
        rows.append([z1, num.value, ref, *num.argmax])
    rows = np.array(rows)
    run.csv("conjugate.csv", ["z", "numeric", "reference"] + [f"lam{i + 1}" for i in range(d)],
            rows)
    scale = max(1.0, float(np.max(np.abs(rows[:, 2]))))
    err = float(np.max(np.abs(rows[:, 1] - rows[:, 2]))) / scale
    run.check("conjugate_vs_reference", err <= 1e-4, relative_error=err)


def cmd_simulate(exp, run, args):
    """Paths under a constant control, moment bound and martingale defects."""
    _require_diffusion(exp, "simulate")
    sim = exp.doc.get("simulate", {})
    base = exp.grid
    # dyadic step count so every moment window holds the same number of steps
    grid = GridSpec(base.t0, base.t1, sim.get("nt", 64), base.state_lo, base.state_hi, base.nx,
                    base.control_resolution)
    n_paths = args.paths or sim.get("n_paths", 20000)
    d = exp.control_set.dim
    start = np.broadcast_to(np.asarray(sim.get("start", 0.0), dtype=float), (grid.dim,))
    lam = np.broadcast_to(np.asarray(sim.get("control", 0.0), dtype=float), (d,))
    ctrl = constant_control(ConstantSelector(lam), grid.t0, grid.t1, grid.lo, grid.hi,
                            control_set=exp.control_set)
    batch = run.timed("simulate", simulate_paths, exp.diffusion, ctrl, grid.t0, start, grid,
                      n_paths, exp.seed, absorb=sim.get("absorb", False))
    run.csv("terminal_states.csv", [f"x{i + 1}" for i in range(grid.dim)], batch.states[:, -1])

    q = sim.get("q", 2)
    n_levels = sim.get("n_levels", 4)
    drift = float(np.linalg.norm(lam)) * exp.diffusion.sigma_bound
    K = sim.get("K_margin", moment_constant(q, exp.diffusion.sigma_bound, drift,
                                            grid.t1 - grid.t0, grid.dim))
    mom = moment_bound_check(batch, q, K, n_levels=n_levels)
    run.csv("moments.csv", ["level", "tau", "estimate", "stderr", "bound"],
            [[m.level, m.tau, m.estimate, m.stderr, m.bound] for m in mom.levels])
    run.check("moment_bound", mom.passed, K_margin=K, q=q)

    thetas = sim.get("theta", [-1.0, -0.5, 0.5, 1.0])
    rows = []
    worst = 0.0
    for th in thetas:
        th = np.broadcast_to(np.asarray(th, dtype=float), (grid.dim,))
        rep = martingale_defect(batch, exp.diffusion, ctrl, th)
        worst = max(worst, rep.max_z)
        for k, (dfc, se) in enumerate(zip(rep.defects, rep.stderrs)):
            rows.append([*th, k, dfc, se])
    run.csv("martingale_defects.csv",
            [f"theta{i + 1}" for i in range(grid.dim)] + ["bin", "defect", "stderr"], rows)
    run.check("martingale_defect", worst <= 4.0, max_z=worst)


def _solve_control_market(exp, run):
    prob = pricing_problem(exp.market, exp.grid, resolution=None)
    vf = run.timed("backward_induction", backward_induction, prob, exp.payoff, exp.grid)
    run.csv("value.csv", _field_header(exp.grid, "v", 2), _field_rows(exp.grid, vf.values,
                                                                      vf.argmax))
    tc = time_consistency_all(vf)
    run.check("time_consistency", tc <= 1e-10, max_deviation=tc)


def cmd_solve_control(exp, run, args):
    """Backward induction, time consistency, cocycle and (if given) the exact
    solution on the inner half-box."""
    if exp.is_market:
        return _solve_control_market(exp, run)
    grid = exp.grid
    vf = run.timed("backward_induction", backward_induction, exp.problem(), exp.payoff, grid)
    run.csv("value.csv", _field_header(grid, "v", exp.control_set.dim),
            _field_rows(grid, vf.values, vf.argmax))
    tol = exp.doc.get("checks", {})
    tc = time_consistency_all(vf)
    run.check("time_consistency", tc <= tol.get("time_consistency_tol", 1e-10), max_deviation=tc)
    coc = check_penalty_cocycle(vf, grid.times[grid.nt // 2])
    run.check("penalty_cocycle", max(coc.additivity_error, coc.decomposition_error) <= 1e-12,
              additivity_error=coc.additivity_error,
              decomposition_error=coc.decomposition_error)
    fel = check_feller_modulus(vf)
    run.json("continuity.json", {"terminal_gap": fel.terminal_gap,
                                 "max_slice_step": fel.max_slice_step,
                                 "max_lipschitz": fel.max_lipschitz,
                                 "exponent": fel.exponent, "constant": fel.constant})
    exact = exp.exact()
    if exact is not None:
        err = relative_error(grid, vf.values, exact)
        run.check("exact_solution", err <= tol.get("exact_tol", 0.01), relative_error=err)


def cmd_solve_pde(exp, run, args):
    """Finite-difference solve of the semilinear equation."""
    _require_diffusion(exp, "solve-pde")
    grid = exp.grid
    scheme = exp.solver.get("scheme", "explicit-upwind")
    pf = run.timed("solve_semilinear", solve_semilinear, exp.diffusion, exp.generator(),
                   exp.payoff, grid, scheme, substeps=exp.solver.get("substeps"),
                   boundary=exp.solver.get("boundary", "clamp"), problem=exp.problem())
    run.csv("value.csv", _field_header(grid, "v", exp.control_set.dim),
            _field_rows(grid, pf.values, pf.argmax))
    run.check("monotone_weights", pf.min_weight >= -1e-14, min_weight=pf.min_weight,
              substeps=pf.substeps)
    exact = exp.exact()
    if exact is not None:
        err = relative_error(grid, pf.values, exact)
        run.check("exact_solution", err <= exp.doc.get("checks", {}).get("exact_tol", 0.01),
                  relative_error=err)


def cmd_price_stochvol(exp, run, args):
    """Quote, strike curve, C sweep, convexity panel and martingale test."""
    _require_market(exp, "price-stochvol")
    pr = exp.doc["pricing"]
    grid, mkt = exp.grid, exp.market
    y = (pr["s0"], pr["y0"])
    quote = run.timed("quote", price_bid_ask, mkt, exp.payoff, grid, y, C=pr.get("C"),
                      surrep_C=pr.get("surrep_C"))
    run.json("quote.json", {"ask": quote.ask, "bid": quote.bid, "surrep": quote.surrep,
                            "surrep_bid": quote.surrep_bid, "control": quote.control_summary})
    run.check("quote_ordering", quote.check(), ask=quote.ask, bid=quote.bid)

    strikes = pr.get("strikes", [pr["strike"]])
    curve = run.timed("strike_curve", strike_curve, mkt, grid, y, strikes, pr["cap"],
                      C=pr.get("C"))
    run.csv("strike_curve.csv", ["strike", "bid", "ask", "surrep_bid", "surrep"], curve)
    run.check("bid_le_ask", bool(np.all(curve[:, 1] <= curve[:, 2] + 1e-9)))

    if pr.get("C_sweep"):
        sweep = c_sweep(mkt, exp.payoff, grid, y, pr["C_sweep"])
        run.csv("c_sweep.csv", ["C", "bid", "ask"], sweep)
        mono = np.all(np.diff(sweep[:, 2]) >= -1e-9) and np.all(np.diff(sweep[:, 1]) <= 1e-9)
        run.check("c_monotone", bool(mono))

    pairs = random_payoff_pairs(grid, n_pairs=2, seed=exp.seed, amplitude=pr["cap"])
    worst = ask_convexity(mkt, grid, pairs, C=pr.get("C"))
    run.check("ask_convexity", worst <= 1e-9, worst_excess=worst)

    n_paths = args.paths or pr.get("n_paths", 20000)
    dt = run.timed("s_martingale", s_martingale_test, mkt, grid, y,
                   n_controls=pr.get("n_controls", 10), n_paths=n_paths, seed=exp.seed)
    run.check("s_martingale", dt.passed, max_drift=dt.max_drift,
              max_z=float(np.max(dt.z_scores)))


def cmd_verify_axioms(exp, run, args):
    """Axiom suite on random payoff pairs plus time consistency."""
    if exp.is_market:
        prob = pricing_problem(exp.market, exp.grid)
    else:
        prob = exp.problem()
    grid = exp.grid
    n_pairs = exp.doc.get("checks", {}).get("axiom_pairs", 10)
    tol = exp.doc.get("checks", {}).get("axiom_tol", 1e-9)
    pairs = random_payoff_pairs(grid, n_pairs=n_pairs, seed=exp.seed)
    engine = ProcedureEngine(prob, grid)
    rep = run.timed("axioms", check_axioms, engine, pairs, tol=tol, raise_on_fail=False)
    run.json("axioms.json", {"violations": rep.violations, "checked": list(rep.checked),
                             "tol": rep.tol, "passed": rep.passed})
    run.check("axioms", rep.passed, **rep.violations)
    vf = backward_induction(prob, exp.payoff, grid)
    tc = time_consistency_all(vf)
    run.check("time_consistency", tc <= 1e-10, max_deviation=tc)


def cmd_compare(exp, run, args):
    """Procedure versus finite differences at the base grid and one 2x
    refinement, plus the shared-lattice equivalence run."""
    _require_diffusion(exp, "compare")
    rows = []
    prob = exp.problem()
    f = exp.generator()
    scheme = exp.solver.get("scheme", "explicit-upwind")
    if scheme == "equivalence":
        scheme = "explicit-upwind"
    for level in (0, 1):
        grid = exp.grid.refine(level)
        vf = backward_induction(prob, exp.payoff, grid)
        pf = solve_semilinear(exp.diffusion, f, exp.payoff, grid, scheme)
        rep = compare_fields(vf, pf)
        rows.append([level, grid.nt, grid.nx[0], rep.max_abs, rep.relative])
        if level == 0:
            eq = solve_semilinear(exp.diffusion, f, exp.payoff, grid, "equivalence", problem=prob)
            eq_diff = float(np.max(np.abs(eq.values - vf.values)))
            res = residual_check(vf, exp.diffusion, f)
    run.csv("compare.csv", ["level", "nt", "nx", "max_abs", "relative"], rows)
    tol = exp.doc.get("checks", {}).get("route_tol", 0.02)
    run.check("route_agreement", rows[0][4] <= tol, relative=rows[0][4])
    floor = 1e-10
    ratio = (max(rows[0][4], floor) / max(rows[1][4], floor))
    run.check("route_shrink", ratio >= 1.5 or rows[1][4] <= floor, ratio=ratio)
    run.check("equivalence_mode", eq_diff <= 1e-10, max_abs=eq_diff)
    run.check("supersolution", res.supersolution, min_residual=res.min,
              tolerance=res.tolerance)


COMMANDS = {
    "conjugate": cmd_conjugate,
    "simulate": cmd_simulate,
    "solve-control": cmd_solve_control,
    "solve-pde": cmd_solve_pde,
    "price-stochvol": cmd_price_stochvol,
    "verify-axioms": cmd_verify_axioms,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="convexfeller", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        summary = " ".join(fn.__doc__.split("\n\n")[0].split())
        p = sub.add_parser(name, help=summary, description=summary)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="JSON configuration file")
        src.add_argument("--preset", choices=sorted(cfg.PRESETS), help="named preset")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out-dir", default="out", help="output directory (default: out)")
        p.add_argument("--paths", type=int, default=None, help="Monte-Carlo path count")
        p.add_argument("--refine", type=int, default=0, help="2x grid refinements to apply")
    return parser


def run(argv=None) -> int:
    """Parse ``argv``, execute, write the manifest; returns the exit code."""
    args = build_parser().parse_args(argv)
    out = Path(args.out_dir)
    started = time.perf_counter()
    manifest = {"command": args.command, "preset": args.preset, "config_path": args.config}
    code = EXIT_OK
    run_ = None
    try:
        doc = cfg.load(args.config) if args.config else cfg.preset(args.preset)
        exp = cfg.build(doc, seed=args.seed)
        if args.refine < 0:
            raise ConfigError("must be >= 0", "--refine")
        exp = exp.refined(args.refine)
        manifest.update(config_hash=cfg.config_hash(doc), seed=exp.seed, name=exp.name,
                        refine=args.refine, paths=args.paths)
        run_ = Run(out)
        COMMANDS[args.command](exp, run_, args)
        code = EXIT_OK if run_.passed else EXIT_CHECK
    except ConfigError as exc:
        code = EXIT_CONFIG
        manifest["error"] = {"type": type(exc).__name__, "field": exc.field, "message": str(exc)}
    except NumericalError as exc:
        code = EXIT_NUMERICAL
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except CheckFailure as exc:
        code = EXIT_CHECK
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except ModelError as exc:
        code = EXIT_MODEL
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
    if "error" in manifest:
        print(f"error: {manifest['error']['message']}", file=sys.stderr)
    manifest["versions"] = _versions()
    manifest["exit_code"] = code
    manifest["status"] = EXIT_CODES[code]
    if run_ is not None:
        manifest["outputs"] = dict(sorted(run_.outputs.items()))
        manifest["checks"] = run_.checks
        manifest["timings"] = {**run_.timings, "total": time.perf_counter() - started}
        for name, c in run_.checks.items():
            print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2, sort_keys=True)
                                       + "\n")
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
