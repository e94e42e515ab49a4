"""Command-line entry point: scenario orchestration and result emission.

Verbs: eigen, evolve, sweep, dump-potential, hardy-fuzz.  Every verb
takes --config with a YAML document; selected keys can be overridden by
flags.  Outputs are CSV files (with the resolved configuration embedded
as comment lines) plus a JSON summary per run.  Reruns with the same
configuration and seed are byte-identical.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 invariant violation detected (a discretization bug, not bad luck).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, MuSpec, RunConfig, flatten_resolved, parse_config
from .evolution import (
    BLOW_UP,
    EvolutionConfig,
    NoAdmissibleEpsilon,
    build_subsolution,
    comparison_check,
    solve_pheat,
    steady_profile_solve,
)
from .geometry import RadialMesh, build_mesh
from .potentials import optimal_constant, potential_on_mesh
from .profiles import initial_profile, random_bump_fields
from .variational import first_eigenpair, linf_norm, rayleigh_quotient

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def write_csv(path: Path, resolved: dict, columns: list[str], rows,
              extra_header: list[str] | None = None) -> None:
    lines = [f"# {key} = {_fmt(val)}" for key, val in flatten_resolved(resolved)]
    lines.extend(extra_header or [])
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_summary(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_fmt) + "\n")


def _mesh_for(cfg: RunConfig):
    origin, boundary = cfg.grade_ends()
    return build_mesh(cfg.domain, cfg.resolution, cfg.grading,
                      grade_origin=origin, grade_boundary=boundary,
                      angular_resolution=cfg.angular_resolution)


def _resolve_mu(spec: MuSpec, eigenvalue: float | None) -> float:
    if not spec.deferred:
        return spec.absolute
    if eigenvalue is None:
        raise ConfigError(f"mu = {spec.raw!r} needs the first eigenvalue; "
                          "an eigen solve is required for this scenario")
    return spec.lambda_multiple * eigenvalue


def _needs_eigen(cfg: RunConfig) -> bool:
    if cfg.u0_profile == "eigenfunction" or cfg.subsolution:
        return True
    specs = list(cfg.mu_grid or [])
    if cfg.mu is not None:
        specs.append(cfg.mu)
    return any(s.deferred for s in specs)


def run_eigen(cfg: RunConfig) -> int:
    mesh = _mesh_for(cfg)
    pair = first_eigenpair(cfg.pot, cfg.cap, cfg.pot.p, mesh, tol=cfg.eig_tol)
    out = cfg.output_dir
    write_csv(out / "eigen.csv", cfg.resolved,
              ["N", "lambda", "residual", "iterations"],
              [(cfg.cap, pair.value, pair.residual, pair.iterations)])
    write_summary(out / "summary.json", {
        "scenario": cfg.scenario, "seed": cfg.seed, "N": cfg.cap,
        "eigenvalue": pair.value, "residual": pair.residual,
        "iterations": pair.iterations, "converged": pair.converged,
        "optimal_constant": optimal_constant(cfg.pot),
        "config": cfg.resolved,
    })
    return EXIT_OK if pair.converged else EXIT_SOLVER


def _evolution_run(cfg: RunConfig, mesh, mu_abs: float, record_fields: bool,
                   eig=None):
    if cfg.u0_profile == "eigenfunction":
        u0 = eig.eigfun.copy()
        u0.values *= cfg.u0_scale / max(linf_norm(eig.eigfun), 1e-300)
    else:
        u0 = initial_profile(mesh, cfg.u0_profile, cfg.u0_scale)
    evo = EvolutionConfig(
        mu=mu_abs, p=cfg.pot.p, pot=cfg.pot, cap=cfg.cap, u0=u0,
        t_end=cfg.t_end, dt0=cfg.dt0, blow_threshold=cfg.blow_threshold,
        dt_min=cfg.dt_min, delta=cfg.delta, record_fields=record_fields,
    )
    return evo, solve_pheat(evo)


def _trace_rows(trace):
    return zip(trace.times.tolist(), trace.l2.tolist(), trace.linf.tolist(),
               trace.dirichlet.tolist(), trace.weighted.tolist())


TRACE_COLUMNS = ["t", "l2", "linf", "dirichlet_energy", "weighted_norm"]


def run_evolve(cfg: RunConfig) -> int:
    mesh = _mesh_for(cfg)
    eig = None
    if _needs_eigen(cfg):
        eig = first_eigenpair(cfg.pot, cfg.cap, cfg.pot.p, mesh, tol=cfg.eig_tol)
        if not eig.converged:
            print("eigen solve did not converge", file=sys.stderr)
            return EXIT_SOLVER
    mu_abs = _resolve_mu(cfg.mu, None if eig is None else eig.value)
    evo, trace = _evolution_run(cfg, mesh, mu_abs, record_fields=cfg.subsolution, eig=eig)

    summary = {
        "scenario": cfg.scenario, "seed": cfg.seed, "mu": mu_abs,
        "mu_raw": cfg.mu.raw, "N": cfg.cap, "status": trace.status,
        "t_star": trace.t_star, "t_final": float(trace.times[-1]),
        "l2_final": float(trace.l2[-1]), "linf_final": float(trace.linf[-1]),
        "optimal_constant": optimal_constant(cfg.pot),
        "config": cfg.resolved,
    }
    if eig is not None:
        summary["eigenvalue"] = eig.value

    code = EXIT_OK
    if cfg.subsolution:
        code = _attach_subsolution(cfg, mesh, mu_abs, eig, evo, trace, summary)

    write_csv(cfg.output_dir / "trace.csv", cfg.resolved, TRACE_COLUMNS,
              _trace_rows(trace), extra_header=[f"# status = {trace.status}"])
    write_summary(cfg.output_dir / "summary.json", summary)
    return code


def _attach_subsolution(cfg, mesh, mu_abs, eig, evo, trace, summary) -> int:
    if not cfg.pot.p > 2.0:
        raise ConfigError("subsolution requires p > 2")
    steady = steady_profile_solve(cfg.pot, cfg.cap, cfg.pot.p, mu_abs, mesh,
                                  eig=eig, eig_tol=cfg.eig_tol, delta=cfg.delta)
    summary["steady_solver"] = {
        "success": steady.success, "residual_dual": steady.residual_dual,
        "residual_nodal_inf": steady.residual_nodal_inf,
        "iterations": steady.iterations, "message": steady.message,
    }
    if not steady.success:
        return EXIT_SOLVER
    interior = ~mesh.boundary_mask
    ratio = float(np.min(evo.u0.values[interior] / steady.profile.values[interior]))
    try:
        sub = build_subsolution(steady.profile, ratio, cfg.pot.p, evo.u0)
    except NoAdmissibleEpsilon as exc:
        summary["subsolution"] = {"error": str(exc)}
        return EXIT_SOLVER
    report = comparison_check(trace.fields, trace.times, sub, linf_norm(evo.u0),
                              steady_residual_inf=steady.residual_nodal_inf)
    summary["subsolution"] = {
        "eps": sub.eps, "predicted_t_max": sub.t_max,
        "comparison_passed": report.passed,
        "worst_violation": report.worst_violation,
        "worst_time": report.worst_time, "times_checked": report.times_checked,
    }
    return EXIT_OK if report.passed else EXIT_INVARIANT


def _sweep_mu_entry(args):
    cfg, index, spec, eigenvalue = args
    mesh = _mesh_for(cfg)
    eig = None
    if cfg.u0_profile == "eigenfunction":
        eig = first_eigenpair(cfg.pot, cfg.cap, cfg.pot.p, mesh, tol=cfg.eig_tol)
    mu_abs = _resolve_mu(spec, eigenvalue)
    _, trace = _evolution_run(cfg, mesh, mu_abs, record_fields=False, eig=eig)
    rows = list(_trace_rows(trace))
    return index, mu_abs, trace.status, trace.t_star, rows


def _sweep_cap_entry(args):
    cfg, index, cap = args
    mesh = _mesh_for(cfg)
    pair = first_eigenpair(cfg.pot, cap, cfg.pot.p, mesh, tol=cfg.eig_tol)
    return index, cap, pair.value, pair.residual, pair.iterations, pair.converged


def run_sweep(cfg: RunConfig) -> int:
    out = cfg.output_dir
    if cfg.scenario == "sweep-N":
        jobs = [(cfg, i, cap) for i, cap in enumerate(cfg.cap_grid)]
        results = _run_parallel(_sweep_cap_entry, jobs, cfg.workers)
        rows = [(cap, lam, res, iters) for _, cap, lam, res, iters, _ in results]
        write_csv(out / "eigen_sweep.csv", cfg.resolved,
                  ["N", "lambda", "residual", "iterations"], rows)
        all_ok = all(ok for *_, ok in results)
        write_summary(out / "summary.json", {
            "scenario": cfg.scenario, "seed": cfg.seed,
            "entries": [{"N": cap, "eigenvalue": lam, "residual": res,
                         "iterations": iters, "converged": ok}
                        for _, cap, lam, res, iters, ok in results],
            "optimal_constant": optimal_constant(cfg.pot),
            "config": cfg.resolved,
        })
        return EXIT_OK if all_ok else EXIT_SOLVER

    eigenvalue = None
    if any(spec.deferred for spec in cfg.mu_grid):
        mesh = _mesh_for(cfg)
        pair = first_eigenpair(cfg.pot, cfg.cap, cfg.pot.p, mesh, tol=cfg.eig_tol)
        if not pair.converged:
            print("eigen solve did not converge", file=sys.stderr)
            return EXIT_SOLVER
        eigenvalue = pair.value
    jobs = [(cfg, i, spec, eigenvalue) for i, spec in enumerate(cfg.mu_grid)]
    results = _run_parallel(_sweep_mu_entry, jobs, cfg.workers)
    entries = []
    for index, mu_abs, status, t_star, rows in results:
        write_csv(out / f"trace_{index:03d}.csv", cfg.resolved, TRACE_COLUMNS, rows,
                  extra_header=[f"# mu = {_fmt(mu_abs)}", f"# status = {status}"])
        entries.append({"index": index, "mu": mu_abs, "status": status, "t_star": t_star})
    write_csv(out / "sweep.csv", cfg.resolved, ["index", "mu", "status", "t_star"],
              [(e["index"], e["mu"], e["status"], e["t_star"]) for e in entries])
    payload = {"scenario": cfg.scenario, "seed": cfg.seed, "entries": entries,
               "optimal_constant": optimal_constant(cfg.pot), "config": cfg.resolved}
    if eigenvalue is not None:
        payload["eigenvalue"] = eigenvalue
    write_summary(out / "summary.json", payload)
    return EXIT_OK


def _run_parallel(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        results = [fn(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, jobs))
    return sorted(results, key=lambda item: item[0])


def run_dump(cfg: RunConfig) -> int:
    mesh = _mesh_for(cfg)
    raw = potential_on_mesh(cfg.pot, mesh, where="nodes", cap=None)
    capped = np.minimum(raw, cfg.cap)
    if isinstance(mesh, RadialMesh):
        columns = ["r", "W", "W_N"]
        rows = zip(mesh.nodes.tolist(), raw.tolist(), capped.tolist())
    else:
        columns = ["x", "y", "W", "W_N"]
        rows = zip(mesh.points[:, 0].tolist(), mesh.points[:, 1].tolist(),
                   raw.tolist(), capped.tolist())
    write_csv(cfg.output_dir / "potential.csv", cfg.resolved, columns, rows)
    if cfg.dump_mesh:
        if isinstance(mesh, RadialMesh):
            mesh_cols = ["r", "weight", "boundary"]
            mesh_rows = zip(mesh.nodes.tolist(), mesh.node_weights.tolist(),
                            (int(b) for b in mesh.boundary_mask))
        else:
            mesh_cols = ["x", "y", "weight", "boundary"]
            mesh_rows = zip(mesh.points[:, 0].tolist(), mesh.points[:, 1].tolist(),
                            mesh.node_weights.tolist(), (int(b) for b in mesh.boundary_mask))
        write_csv(cfg.output_dir / "mesh.csv", cfg.resolved, mesh_cols, mesh_rows)
    write_summary(cfg.output_dir / "summary.json", {
        "scenario": cfg.scenario, "seed": cfg.seed, "N": cfg.cap,
        "W_max_truncated": float(capped.max()),
        "optimal_constant": optimal_constant(cfg.pot), "config": cfg.resolved,
    })
    return EXIT_OK


def run_fuzz(cfg: RunConfig) -> int:
    mesh = _mesh_for(cfg)
    constant = optimal_constant(cfg.pot)
    fields = random_bump_fields(mesh, cfg.fuzz_count, cfg.seed)
    rows = []
    violations = 0
    worst = np.inf
    for i, u in enumerate(fields):
        q = rayleigh_quotient(u, cfg.pot, cfg.fuzz_cap, cfg.pot.p)
        worst = min(worst, q)
        if q < constant - cfg.floor_margin:
            violations += 1
        rows.append((i, q))
    write_csv(cfg.output_dir / "hardy_fuzz.csv", cfg.resolved, ["index", "quotient"], rows,
              extra_header=[f"# optimal_constant = {_fmt(constant)}",
                            f"# violations = {violations}"])
    write_summary(cfg.output_dir / "summary.json", {
        "scenario": cfg.scenario, "seed": cfg.seed, "count": cfg.fuzz_count,
        "cap": cfg.fuzz_cap, "optimal_constant": constant,
        "floor_margin": cfg.floor_margin, "min_quotient": float(worst),
        "violations": violations, "config": cfg.resolved,
    })
    return EXIT_OK if violations == 0 else EXIT_INVARIANT


_VERB_SCENARIOS = {
    "eigen": ("eigen",),
    "evolve": ("evolve",),
    "sweep": ("sweep-mu", "sweep-N"),
    "dump-potential": ("potential-dump",),
    "hardy-fuzz": ("hardy-fuzz",),
}

_RUNNERS = {
    "eigen": run_eigen,
    "evolve": run_evolve,
    "sweep-mu": run_sweep,
    "sweep-N": run_sweep,
    "potential-dump": run_dump,
    "hardy-fuzz": run_fuzz,
}


def run_scenario(cfg: RunConfig) -> int:
    """Execute a validated configuration; artifacts land in cfg.output_dir."""
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[cfg.scenario](cfg)


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="YAML configuration file")
    sub.add_argument("--output-dir", dest="output_dir", help="override output directory")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument("--workers", type=int, help="parallel workers for sweeps")
    sub.add_argument("--mu", help="override the reaction coefficient (number, 'xC' or 'xlambda')")
    sub.add_argument("--N", dest="N", type=float, help="override the truncation level")
    sub.add_argument("--resolution", type=int, help="override mesh resolution")
    sub.add_argument("--grading", type=float, help="override mesh grading")
    sub.add_argument("--t-end", dest="t_end", type=float, help="override the time horizon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pheatlab",
        description="Singular p-heat laboratory: Hardy floors, eigenvalues, "
                    "decay versus blow-up.",
    )
    subparsers = parser.add_subparsers(dest="verb", required=True)
    for verb in _VERB_SCENARIOS:
        sub = subparsers.add_parser(verb)
        _add_common_flags(sub)
        if verb == "dump-potential":
            sub.add_argument("--dump-mesh", action="store_true", default=None,
                             help="also write node/weight/boundary CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, key, None)
                 for key in ("output_dir", "seed", "workers", "mu", "N",
                             "resolution", "grading", "t_end")}
    if getattr(args, "dump_mesh", None):
        overrides["dump_mesh"] = True
    try:
        cfg = parse_config(args.config, overrides)
        allowed = _VERB_SCENARIOS[args.verb]
        if cfg.scenario not in allowed:
            raise ConfigError(f"verb {args.verb!r} expects scenario in {allowed}, "
                              f"got {cfg.scenario!r}")
        return run_scenario(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
