"""Command-line scenario runner: spectral sweeps, eigen-elements, dynamics.

Exit codes: 0 success, 2 usage/config error, 3 subcritical model, 1 other
failure. Errors are emitted as a machine-readable JSON object on stdout.
All CSV output uses LF endings, '.' decimals, and stable column order.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import ibm, kernel, malthus, pde, spectral
from .model import (AgeGrid, ConfigError, PRESETS, ScenarioConfig, build_grids,
                    build_model, parse_config, validate_assumptions)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_SUBCRITICAL = 3

LAMBDA_SAMPLE = (0.0, 0.5, 1.0, 2.0, 3.0)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def _write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(args) -> ScenarioConfig:
    if getattr(args, "preset", None):
        config = PRESETS[args.preset]()
    elif args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as f:
            config = parse_config(f.read())
    else:
        raise ConfigError("no config given: use --config PATH or the scenario command")
    overrides = {}
    for name in ("nx", "da", "tol", "seed"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    return config


def _setup(config: ScenarioConfig):
    model = build_model(config)
    tgrid, agrid = build_grids(config, model)
    return model, tgrid, agrid


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_spectral(config, out: str) -> dict:
    model, tgrid, agrid = _setup(config)
    rows = []
    for lam in LAMBDA_SAMPLE:
        ck = kernel.collapse(model, tgrid, agrid, lam)
        direct = spectral.assemble(ck, tgrid, "direct")
        dual = spectral.assemble(ck, tgrid, "dual")
        pd = spectral.regime_classify(spectral.perron(direct), ck, tgrid)
        pq = spectral.perron(dual)
        rows.append((lam, pd.rho, pq.rho, ck.rbar, pd.rho - ck.rbar, pd.regime))
    path = os.path.join(out, "rho_curve.csv")
    _write_csv(path, ["lambda", "rho_direct", "rho_dual", "rbar", "gap", "regime"], rows)
    return {"rho_curve": rows[0][1], "manifest": [path]}


def _solve(config):
    model, tgrid, agrid = _setup(config)
    problem = malthus.MalthusProblem(model, tgrid, agrid)
    triple = malthus.solve_eigentriple(problem, tol_lam=min(config.tol * 1e4, 1e-6))
    return model, tgrid, agrid, problem, triple


def cmd_malthus(config, out: str) -> dict:
    model, tgrid, agrid, problem, triple = _solve(config)
    rho0, _ = problem.rho_of_lambda(0.0)
    path = os.path.join(out, "eigen_triple.csv")
    rows = ((x, a, triple.N_grid[i, j], triple.phi_grid[i, j])
            for i, x in enumerate(tgrid.nodes)
            for j, a in enumerate(agrid.nodes))
    _write_csv(path, ["x", "a", "N", "phi"], rows)
    return {
        "lambda_star": triple.lambda_star,
        "rho_at_zero": rho0,
        "regime": triple.regime,
        "eta_lower": triple.eta_lower,
        "eta_lower_proof": triple.eta_lower_proof,
        "norms": triple.norms,
        "manifest": [path],
    }


def cmd_stationary(config, out: str) -> dict:
    model, tgrid, agrid, problem, triple = _solve(config)
    lam, nbar, mass = malthus.stationary_state(problem, triple)
    solver = pde.TransportSolver(model, tgrid, agrid)
    residual = pde.stationary_residual(solver, nbar)
    path = os.path.join(out, "stationary.csv")
    rows = ((x, a, nbar[i, j]) for i, x in enumerate(tgrid.nodes)
            for j, a in enumerate(agrid.nodes))
    _write_csv(path, ["x", "a", "nbar"], rows)
    return {"lambda_star": lam, "mass": mass, "c_mass": model.competition * mass,
            "weak_form_residual": residual, "regime": triple.regime,
            "manifest": [path]}


def cmd_pde(config, out: str, tmax: float) -> dict:
    model, tgrid, agrid, problem, triple = _solve(config)
    lam, nbar, _ = malthus.stationary_state(problem, triple)
    solver = pde.TransportSolver(model, tgrid, agrid)
    state = pde.uniform_state(tgrid, agrid)
    stride = max(1, int(round(0.1 / solver.dt)))
    _, trace = pde.run(solver, state, tmax, mode="nonlinear", target=nbar,
                       phi=triple.phi_grid, lam_star=lam, record_every=stride)
    path = os.path.join(out, "pde_trace.csv")
    rows = zip(trace.t, trace.mass, trace.tv_to_target, trace.phi_weighted_dist,
               [math.nan] * len(trace.t), trace.D_t, trace.truncation_loss)
    _write_csv(path, ["t", "mass", "tv_to_stationary", "phi_dist", "invariant",
                      "D_t", "truncation_loss"], rows)
    return {"lambda_star": lam, "final_mass": trace.mass[-1],
            "final_tv": trace.tv_to_target[-1], "regime": triple.regime,
            "manifest": [path]}


def cmd_ibm(config, out: str, tmax: float, replicates: int, scale: int) -> dict:
    model, tgrid, agrid, problem, triple = _solve(config)
    sample_times = np.linspace(0.0, tmax, 11)

    def init_sampler(rep_seed):
        return ibm.sample_from_density(triple.N_grid, tgrid, agrid, scale, rep_seed)

    logs = ibm.run_replicates(model, tgrid, scale, tmax, sample_times,
                              config.seed, replicates, init_sampler=init_sampler,
                              linear=True)
    series = ibm.martingale_series(logs, triple.phi_grid, triple.lambda_star,
                                   tgrid, agrid)
    path = os.path.join(out, "ibm_trace.csv")
    rows = ((log.replicate, t, log.masses[s], series["V"][m, s])
            for m, log in enumerate(logs)
            for s, t in enumerate(log.sample_times))
    _write_csv(path, ["replicate", "t", "mass", "V"], rows)
    md, se = series["mean_drift"], series["se"]
    return {"lambda_star": triple.lambda_star, "mean_drift": md, "se": se,
            "ci": [md - 3 * se, md + 3 * se], "manifest": [path]}


def _refinement_rows(config, nx_list):
    def make_problem(nx):
        from dataclasses import replace
        cfg = replace(config, nx=nx)
        model, tgrid, agrid = _setup(cfg)
        return malthus.MalthusProblem(model, tgrid, agrid)
    return malthus.refinement_sweep(make_problem, nx_list)


def cmd_verify(config, out: str) -> dict:
    model, tgrid, agrid = _setup(config)
    checks = {}
    report = validate_assumptions(model, tgrid, agrid)
    checks["assumptions"] = report.all_ok
    ck = kernel.collapse(model, tgrid, agrid, 0.0)
    direct = spectral.assemble(ck, tgrid, "direct")
    dual = spectral.assemble(ck, tgrid, "dual")
    checks["adjoint_defect"] = spectral.adjoint_residual(direct, dual) <= 1e-12
    pd = spectral.perron(direct)
    pq = spectral.perron(dual)
    checks["rho_identity"] = abs(pd.rho - pq.rho) <= 1e-10 * pd.rho

    problem = malthus.MalthusProblem(model, tgrid, agrid)
    rhos = [problem.rho_of_lambda(l)[0] for l in LAMBDA_SAMPLE]
    checks["rho_decreasing"] = all(a > b + 1e-6 for a, b in zip(rhos, rhos[1:]))

    manifest = []
    summary = {"checks": checks, "rho_at_zero": pd.rho}
    try:
        triple = malthus.solve_eigentriple(problem)
    except malthus.SubcriticalError:
        raise
    checks["norm_intN"] = abs(triple.norms["intN"] - 1.0) <= 1e-8
    checks["norm_intNphi"] = abs(triple.norms["intNphi"] - 1.0) <= 1e-8
    summary["lambda_star"] = triple.lambda_star
    summary["regime"] = triple.regime
    summary["eta_lower"] = triple.eta_lower
    if triple.regime == "Regular" and model.competition > 0:
        lam, nbar, mass = malthus.stationary_state(problem, triple)
        solver = pde.TransportSolver(model, tgrid, agrid)
        checks["c_mass_is_lambda"] = abs(model.competition * mass - lam) <= 1e-8
        checks["stationary_residual"] = pde.stationary_residual(solver, nbar) <= 1e-3
    else:
        summary["convergence_report"] = "refused: regime not certified Regular"
        rows = _refinement_rows(config, [max(tgrid.n // 4, 8), tgrid.n // 2, tgrid.n])
        path = os.path.join(out, "refinement.csv")
        _write_csv(path, ["nx", "lambda_star_h", "gap", "mass_in_band"],
                   [(r["nx"], r["lambda_star_h"], r["gap"], r["mass_in_band"])
                    for r in rows])
        manifest.append(path)
    summary["checks"] = checks
    summary["all_green"] = all(checks.values())
    summary["manifest"] = manifest
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structpop",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", default="out")
        sp.add_argument("--nx", type=int, default=None)
        sp.add_argument("--da", type=float, default=None)
        sp.add_argument("--tol", type=float, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--replicates", type=int, default=20)
        sp.add_argument("--tmax", type=float, default=10.0)

    for name in ("spectral", "malthus", "stationary", "pde", "ibm", "verify"):
        common(sub.add_parser(name))
    sc = sub.add_parser("scenario")
    sc.add_argument("preset", choices=sorted(PRESETS))
    sc.add_argument("--verify", action="store_true")
    common(sc)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        config = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        command = args.command
        if command == "scenario":
            summary = cmd_malthus(config, args.out)
            if args.verify:
                v = cmd_verify(config, args.out)
                summary["verify"] = {k: v[k] for k in ("checks", "all_green")}
                summary["manifest"] += v["manifest"]
            if summary["regime"] != "Regular":
                summary["convergence_report"] = "refused: regime not certified Regular"
        elif command == "spectral":
            summary = cmd_spectral(config, args.out)
        elif command == "malthus":
            summary = cmd_malthus(config, args.out)
        elif command == "stationary":
            summary = cmd_stationary(config, args.out)
        elif command == "pde":
            summary = cmd_pde(config, args.out, args.tmax)
        elif command == "ibm":
            summary = cmd_ibm(config, args.out, args.tmax, args.replicates, 500)
        else:
            summary = cmd_verify(config, args.out)
        summary["scenario"] = getattr(args, "preset", None) or args.config
        summary["config"] = config.to_dict()
        if "manifest" in summary:    # relative names keep reruns byte-identical
            summary["manifest"] = [os.path.basename(p) for p in summary["manifest"]]
        path = os.path.join(args.out, "summary.json")
        _write_json(path, summary)
        print(json.dumps({"status": "ok", "summary": path}))
        return EXIT_OK
    except ConfigError as e:
        print(json.dumps({"status": "error", "kind": "config", "message": str(e)}))
        return EXIT_USAGE
    except malthus.SubcriticalError as e:
        print(json.dumps({"status": "error", "kind": "subcritical", "message": str(e)}))
        return EXIT_SUBCRITICAL
    except Exception as e:   # noqa: BLE001 - CLI boundary
        print(json.dumps({"status": "error", "kind": type(e).__name__,
                          "message": str(e)}))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
