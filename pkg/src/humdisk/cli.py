"""Command-line driver: experiment orchestration and report emission.

Subcommands: simulate, backward, synthesize-null, synthesize-approx,
audit-carleman, audit-observability, sweep-cost, verify-all.  Every run
writes its CSV outputs plus an ``effective_config.txt`` echo under the
configured output directory.  Exit codes: 0 success, 1 invariant or
assertion failure (named on stderr), 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .analysis import (CARLEMAN_HEADER, OBSERVABILITY_HEADER, carleman_sides,
                       duality_gap, observability_ratio,
                       smoothed_random_terminal, write_csv)
from .backward import backward_solve, oracle_backward_dense
from .config import (ConfigError, ExperimentConfig, RunContext,
                     apply_overrides, effective_text, instantiate,
                     load_config, parse_config)
from .control import (COST_SWEEP_HEADER, JepsProblem, PenaltyConfig,
                      sweep_cost, synthesize_approximate, synthesize_null)
from .forward import (ControlTriple, build_level_operators, forward_solve,
                      msq_norm, terminal_ratio)
from .mesh import CoefficientSet, MeshError, build_polar_mesh, ControlRegion
from .stochastics import (TreeError, brownian_field, build_tree, cond_expect,
                          tree_expectation)
from .weights import (WeightError, build_psi, cost_factor_K,
                      evaluate_weights, half_step_times, min_lambda_adjoint,
                      verify_weight_bounds)

SUBCOMMANDS = ("simulate", "backward", "synthesize-null", "synthesize-approx",
               "audit-carleman", "audit-observability", "sweep-cost",
               "verify-all")


class InvariantFailure(AssertionError):
    """A named runtime invariant did not hold."""


def _check(name: str, condition: bool,
           record: list[dict] | None = None) -> None:
    if not condition:
        raise InvariantFailure(name)
    if record is not None and all(r["check"] != name for r in record):
        record.append({"check": name, "status": "pass"})


def _penalty(cfg: ExperimentConfig) -> PenaltyConfig:
    return PenaltyConfig(eps=cfg.eps, eps_reg=cfg.eps_reg,
                         cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)


def _problem(ctx: RunContext) -> JepsProblem:
    ws = ctx.weight_set()
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    return JepsProblem(ctx.mesh, ctx.region, ctx.coeffs, ws, ctx.tree,
                       _penalty(ctx.cfg), ops=ops)


def _cmd_simulate(ctx: RunContext, rng: np.random.Generator, outdir: str) -> None:
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    y0 = ctx.default_initial_state()
    sol = forward_solve(y0, None, ops)
    rows = [{"level": k, "t": float(k * ctx.tree.dt),
             "energy": msq_norm(ops.M, sol.y[k])}
            for k in range(ctx.tree.n_t + 1)]
    tr = terminal_ratio(sol, y0)
    _check("terminal_ratio nonnegative", tr.value >= 0.0)
    write_csv(os.path.join(outdir, "simulate.csv"),
              ["level", "t", "energy"], rows)


def _cmd_backward(ctx: RunContext, rng: np.random.Generator, outdir: str) -> None:
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    zT = smoothed_random_terminal(ctx.mesh, ctx.tree, rng)
    bsol = backward_solve(zT, ops)
    rows = [{"level": k, "t": float(k * ctx.tree.dt),
             "energy": msq_norm(ops.M, bsol.z[k])}
            for k in range(ctx.tree.n_t + 1)]
    write_csv(os.path.join(outdir, "backward.csv"),
              ["level", "t", "energy"], rows)


def _cmd_synthesize_null(ctx: RunContext, rng: np.random.Generator,
                         outdir: str) -> None:
    problem = _problem(ctx)
    y0 = ctx.default_initial_state()
    _, rep = synthesize_null(y0, problem)
    jv = rep.j_values
    _check("CG model values nonincreasing",
           all(jv[i + 1] <= jv[i] + 1e-12 * abs(jv[i])
               for i in range(len(jv) - 1)))
    _check("control cost finite", np.isfinite(rep.control_cost))
    row = {
        "iterations": rep.iterations,
        "converged": rep.converged,
        "final_gradient_norm": rep.final_gradient_norm,
        "terminal_ratio": rep.terminal_ratio,
        "control_cost": rep.control_cost,
        "weighted_cost": rep.weighted_cost,
        "jeps_value": rep.jeps_value,
        "K": rep.K,
        "effective_C": rep.effective_C,
        "stationarity_residual": rep.stationarity_residual,
    }
    write_csv(os.path.join(outdir, "synthesis_null.csv"),
              list(row.keys()), [row])


def _cmd_synthesize_approx(ctx: RunContext, rng: np.random.Generator,
                           outdir: str) -> None:
    problem = _problem(ctx)
    y0 = ctx.default_initial_state()
    # Reachable target: the terminal state produced by seeded random controls.
    probe = ControlTriple.zeros(ctx.tree, ctx.mesh, ctx.region)
    for k in range(ctx.tree.n_t):
        probe.u[k] = ctx.region.indicator * rng.standard_normal(
            (2**k, ctx.mesh.n_dof))
    target = forward_solve(y0, probe, problem.ops).y[ctx.tree.n_t]
    _, rep = synthesize_approximate(y0, target, problem)
    row = {k: rep[k] for k in ("iterations", "converged",
                               "final_gradient_norm", "achieved_distance",
                               "control_cost", "eps")}
    write_csv(os.path.join(outdir, "synthesis_approx.csv"),
              list(row.keys()), [row])


def _cmd_audit_carleman(ctx: RunContext, rng: np.random.Generator,
                        outdir: str, n_instances: int = 20) -> None:
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    ws = ctx.weight_set()
    rows = []
    for i in range(n_instances):
        zT = smoothed_random_terminal(ctx.mesh, ctx.tree, rng)
        bsol = backward_solve(zT, ops)
        rep = carleman_sides(bsol, ws, ctx.region, "adjoint",
                             ctx.lambda_threshold)
        rows.append({
            "instance_id": i,
            "lambda_multiple": ctx.cfg.lambda_factor,
            "lhs_total": rep.lhs_total,
            "rhs_total": rep.rhs_total,
            "ratio": rep.ratio,
            "below_threshold": rep.below_threshold,
        })
    write_csv(os.path.join(outdir, "carleman.csv"),
              CARLEMAN_HEADER + ["below_threshold"], rows)


def _cmd_audit_observability(ctx: RunContext, rng: np.random.Generator,
                             outdir: str) -> None:
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    zT = np.ones((2**ctx.tree.n_t, ctx.mesh.n_dof))
    bsol = backward_solve(zT, ops)
    K = cost_factor_K(ctx.cfg.T, ctx.norms).K
    rep = observability_ratio(bsol, ctx.region, K)
    _check("observability not degenerate", not rep.failure)
    write_csv(os.path.join(outdir, "observability.csv"), OBSERVABILITY_HEADER,
              [{"T": ctx.cfg.T, "K": rep.K, "ratio": rep.ratio}])


def _cmd_sweep_cost(ctx: RunContext, rng: np.random.Generator,
                    outdir: str) -> None:
    cfg = ctx.cfg
    mesh, region, psi = ctx.mesh, ctx.region, ctx.psi

    def make_problem(T: float, a1: float) -> JepsProblem:
        coeffs = CoefficientSet(A=ctx.coeffs.A, b_surf=cfg.b_surf, a1=a1,
                                a2=cfg.a2, B1=np.asarray(cfg.B1, dtype=float),
                                B2=cfg.B2, beta0=cfg.beta0)
        tree = build_tree(cfg.n_t, T)
        ops = build_level_operators(mesh, coeffs, tree)
        norms = coeffs.sup_norms(mesh, ops.times)
        lam = cfg.lambda_factor * min_lambda_adjoint(T, norms, cfg.lambda0)
        ws = evaluate_weights(psi, mesh, lam=lam, mu=cfg.mu, T=T,
                              times=half_step_times(T, cfg.n_t),
                              eps_reg=cfg.eps_reg)
        return JepsProblem(mesh, region, coeffs, ws, tree, _penalty(cfg),
                           ops=ops)

    rows, fit = sweep_cost([0.5, 1.0, 2.0], [0.0, 2.0, 8.0], make_problem,
                           lambda m: np.cos(np.pi * m.node_r / (2.0 * cfg.R)))
    write_csv(os.path.join(outdir, "cost_sweep.csv"), COST_SWEEP_HEADER, rows)
    write_csv(os.path.join(outdir, "cost_sweep_fit.csv"),
              ["slope", "intercept", "residual", "points"], [fit])
    _check("cost-sweep slope nonnegative",
           not np.isfinite(fit["slope"]) or fit["slope"] >= 0.0)


def _cmd_verify_all(ctx: RunContext, rng: np.random.Generator,
                    outdir: str) -> None:
    mesh, tree = ctx.mesh, ctx.tree
    ops = build_level_operators(mesh, ctx.coeffs, tree)
    rows: list[dict] = []

    # Stiffness symmetry and kernel.
    S = ops.forms[0].S
    _check("S symmetric", abs(S - S.T).max() <= 1e-12 * abs(S).max(), rows)
    ones = np.ones(mesh.n_dof)
    _check("S kernel contains constants",
           float(np.max(np.abs(S @ ones))) <= 1e-12 * abs(S).max(), rows)

    # Mass conservation for the pure-diffusion flow.
    pure = CoefficientSet(A=ctx.coeffs.A, b_surf=ctx.cfg.b_surf,
                          beta0=ctx.cfg.beta0)
    ops0 = build_level_operators(mesh, pure, tree)
    y0 = ctx.default_initial_state()
    sol0 = forward_solve(y0, None, ops0)
    m0 = float(np.sum(ops0.M * y0))
    for k in range(tree.n_t + 1):
        mk = float(tree_expectation(np.sum(ops0.M * sol0.y[k], axis=-1)))
        _check("mass conservation", abs(mk - m0) <= 1e-10 * abs(m0), rows)

    # Forward contraction of the free pure-diffusion evolution.
    for k in range(tree.n_t):
        _check("forward contraction",
               msq_norm(ops0.M, sol0.y[k + 1])
               <= msq_norm(ops0.M, sol0.y[k]) * (1 + 1e-12), rows)

    # Backward norm monotonicity for the pure-diffusion adjoint flow.
    zT0 = rng.standard_normal((2**tree.n_t, mesh.n_dof))
    bsol0 = backward_solve(zT0, ops0)
    for k in range(tree.n_t):
        ek = float(tree_expectation(np.sum(ops0.M * bsol0.z[k] ** 2, axis=-1)))
        ek1 = float(tree_expectation(np.sum(ops0.M * bsol0.z[k + 1] ** 2,
                                            axis=-1)))
        _check("backward norm monotonicity", ek <= ek1 * (1 + 1e-12), rows)

    # Weight boundary constancy.
    ws = ctx.weight_set()
    for k in range(tree.n_t):
        bvals = ws.alpha[k][mesh.boundary]
        _check("weight boundary constancy",
               float(np.max(bvals) - np.min(bvals)) == 0.0, rows)
    bounds = verify_weight_bounds(ws)
    _check("weight bound constants finite",
           all(np.isfinite(v) for v in bounds.values()), rows)

    # Tower property and Ito isometry of the Brownian field.
    w = brownian_field(tree)
    for k in range(tree.n_t):
        down = cond_expect(w[k + 1])
        _check("tower property", float(np.max(np.abs(down - w[k]))) <= 1e-12,
               rows)
        var = float(tree_expectation(w[k][:, 0] ** 2))
        _check("Ito isometry", abs(var - k * tree.dt) <= 1e-12, rows)

    # Exact duality on one random instance.
    controls = ControlTriple.zeros(tree, mesh, ctx.region)
    for k in range(tree.n_t):
        controls.u[k] = ctx.region.indicator * rng.standard_normal(
            (2**k, mesh.n_dof))
        controls.v1[k] = rng.standard_normal((2**k, mesh.n_dof))
        v2 = np.zeros((2**k, mesh.n_dof))
        v2[:, mesh.boundary] = rng.standard_normal((2**k, mesh.n_theta))
        controls.v2[k] = v2
    fsol = forward_solve(y0, controls, ops)
    zT = rng.standard_normal((2**tree.n_t, mesh.n_dof))
    bsol = backward_solve(zT, ops)
    _check("exact duality", duality_gap(fsol, bsol, controls) <= 1e-10, rows)

    # Backward oracle equivalence on a small instance.
    small_mesh = build_polar_mesh(1.0, 4, 8)
    small_tree = build_tree(2, 1.0)
    small_ops = build_level_operators(small_mesh, pure, small_tree)
    zT_s = rng.standard_normal((4, small_mesh.n_dof))
    ref = backward_solve(zT_s, small_ops)
    orc = oracle_backward_dense(zT_s, small_ops)
    err = max(float(np.max(np.abs(ref.z[k] - orc.z[k])))
              for k in range(small_tree.n_t + 1))
    scale = max(float(np.max(np.abs(ref.z[k])))
                for k in range(small_tree.n_t + 1))
    _check("backward oracle equivalence", err <= 1e-10 * scale, rows)

    write_csv(os.path.join(outdir, "verify_all.csv"), ["check", "status"],
              rows)


_DISPATCH = {
    "simulate": _cmd_simulate,
    "backward": _cmd_backward,
    "synthesize-null": _cmd_synthesize_null,
    "synthesize-approx": _cmd_synthesize_approx,
    "audit-carleman": _cmd_audit_carleman,
    "audit-observability": _cmd_audit_observability,
    "sweep-cost": _cmd_sweep_cost,
    "verify-all": _cmd_verify_all,
}


def run(subcommand: str, config_path: str | None,
        overrides: list[str] | None = None, seed: int | None = None,
        out: str | None = None, threads: int | None = None) -> int:
    """Programmatic entry point mirroring the CLI; returns the exit code."""
    try:
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        cfg = load_config(config_path) if config_path else parse_config("")
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        if seed is not None:
            cfg = apply_overrides(cfg, [f"seed={seed}"])
        if out is not None:
            cfg = apply_overrides(cfg, [f"output_dir={out}"])
        if threads is None:
            env = os.environ.get("HUMDISK_THREADS")
            threads = int(env) if env else None
        if threads is not None:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = str(threads)
        ctx = instantiate(cfg)
    except (ConfigError, MeshError, TreeError, WeightError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "effective_config.txt"), "w") as fh:
        fh.write(effective_text(cfg))
    rng = np.random.default_rng(cfg.seed)
    try:
        _DISPATCH[subcommand](ctx, rng, outdir)
    except InvariantFailure as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="humdisk",
        description="Stochastic parabolic control on the disk: simulation, "
                    "synthesis, and estimate audits.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    return run(args.subcommand, args.config, args.set, args.seed, args.out,
               args.threads)


if __name__ == "__main__":
    sys.exit(main())
