"""End-to-end acceptance gate.

Each test is one acceptance criterion and prints as a single pass/fail
line under ``pytest -v``.  All tolerances are asserted, never logged.
"""

import os

import numpy as np
import pytest

from humdisk.analysis import (carleman_sides, duality_gap,
                              smoothed_random_terminal)
from humdisk.backward import backward_solve, oracle_backward_dense
from humdisk.cli import run
from humdisk.config import instantiate, load_config
from humdisk.control import (JepsProblem, PenaltyConfig,
                             jeps_value_and_gradient, synthesize_null)
from humdisk.forward import (ControlTriple, build_level_operators,
                             forward_solve)
from humdisk.mesh import CoefficientSet, build_polar_mesh
from humdisk.stochastics import build_tree, tree_expectation

REF_CFG = os.path.join(os.path.dirname(__file__), "..", "configs",
                       "reference.cfg")


def _random_controls(mesh, tree, region, rng):
    controls = ControlTriple.zeros(tree, mesh, region)
    for k in range(tree.n_t):
        controls.u[k] = rng.standard_normal((2**k, mesh.n_dof)) * region.indicator
        controls.v1[k] = rng.standard_normal((2**k, mesh.n_dof))
        v2 = np.zeros((2**k, mesh.n_dof))
        v2[:, mesh.boundary] = rng.standard_normal((2**k, len(mesh.boundary)))
        controls.v2[k] = v2
    return controls


def test_criterion_1_exact_duality_on_ten_random_instances(
        ref_mesh, ref_region, ref_tree, ref_ops):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        controls = _random_controls(ref_mesh, ref_tree, ref_region, rng)
        y0 = rng.standard_normal(ref_mesh.n_dof)
        zT = rng.standard_normal((2**ref_tree.n_t, ref_mesh.n_dof))
        fsol = forward_solve(y0, controls, ref_ops)
        bsol = backward_solve(zT, ref_ops)
        assert duality_gap(fsol, bsol, controls) <= 1e-10
    # fault injection: a corrupted backward solution must be detected
    bsol.z[4] = bsol.z[4] * (1.0 + 1e-3)
    assert duality_gap(fsol, bsol, controls) > 1e-6


def test_criterion_2_backward_solver_matches_dense_oracle():
    mesh = build_polar_mesh(1.0, 4, 8)          # 33 dof
    coeffs = CoefficientSet(a1=0.8, a2=0.4, B1=(0.5, -0.3), B2=0.2)
    for seed, n_t in zip(range(5), (1, 2, 3, 3, 2)):
        tree = build_tree(n_t, 1.0)
        ops = build_level_operators(mesh, coeffs, tree)
        rng = np.random.default_rng(seed)
        zT = rng.standard_normal((2**n_t, mesh.n_dof))
        fast = backward_solve(zT, ops)
        dense = oracle_backward_dense(zT, ops)
        scale = max(float(np.max(np.abs(dense.z[k])))
                    for k in range(n_t + 1))
        for k in range(n_t + 1):
            assert np.max(np.abs(fast.z[k] - dense.z[k])) <= 1e-10 * scale
        for k in range(n_t):
            assert np.max(np.abs(fast.Zt[k] - dense.Zt[k])) <= 1e-10 * scale


def test_criterion_3_analytic_gradient_matches_central_differences(
        ref_problem, ref_y0):
    p = ref_problem
    rng = np.random.default_rng(2024)
    base = ControlTriple.zeros(p.tree, p.mesh, p.region)
    for k in range(p.tree.n_t):
        base.u[k] = 1e-2 * rng.standard_normal((2**k, p.mesh.n_dof)) \
            * p.region.indicator
        base.v1[k] = 1e-2 * rng.standard_normal((2**k, p.mesh.n_dof))
    _, grad = jeps_value_and_gradient(base, ref_y0, p)
    h = 1e-5
    for _ in range(5):
        d = _random_controls(p.mesh, p.tree, p.region, rng)
        plus, minus = base.copy(), base.copy()
        for k in range(p.tree.n_t):
            plus.u[k] = base.u[k] + h * d.u[k]
            plus.v1[k] = base.v1[k] + h * d.v1[k]
            plus.v2[k] = base.v2[k] + h * d.v2[k]
            minus.u[k] = base.u[k] - h * d.u[k]
            minus.v1[k] = base.v1[k] - h * d.v1[k]
            minus.v2[k] = base.v2[k] - h * d.v2[k]
        vp, _ = jeps_value_and_gradient(plus, ref_y0, p)
        vm, _ = jeps_value_and_gradient(minus, ref_y0, p)
        fd = (vp - vm) / (2.0 * h)
        an = 0.0
        for k in range(p.tree.n_t):
            an += p.tree.dt * float(tree_expectation(
                np.sum(p.mesh.w_bulk * grad.u[k] * d.u[k], axis=-1)
                + np.sum(p.mesh.w_bulk * grad.v1[k] * d.v1[k], axis=-1)
                + np.sum(p.mesh.w_surf_full * grad.v2[k] * d.v2[k], axis=-1)))
        assert abs(fd - an) / max(abs(fd), abs(an)) <= 1e-6


def test_criterion_4_null_control_synthesis_on_reference_config():
    ctx = instantiate(load_config(REF_CFG))
    ws = ctx.weight_set()
    pen = PenaltyConfig(eps=ctx.cfg.eps, eps_reg=ctx.cfg.eps_reg,
                        cg_tol=ctx.cfg.cg_tol, cg_max_iter=ctx.cfg.cg_max_iter)
    problem = JepsProblem(ctx.mesh, ctx.region, ctx.coeffs, ws, ctx.tree, pen)
    y0 = ctx.default_initial_state()
    _, rep = synthesize_null(y0, problem)
    assert rep.converged
    assert rep.terminal_ratio <= 1e-3
    assert rep.stationarity_residual <= 1e-6
    assert all(b <= a + 1e-12 * abs(a)
               for a, b in zip(rep.j_values, rep.j_values[1:]))
    # quartering the penalty parameter must not worsen the terminal ratio
    pen4 = PenaltyConfig(eps=ctx.cfg.eps / 4.0, eps_reg=ctx.cfg.eps_reg,
                         cg_tol=ctx.cfg.cg_tol, cg_max_iter=ctx.cfg.cg_max_iter)
    problem4 = JepsProblem(ctx.mesh, ctx.region, ctx.coeffs, ws, ctx.tree,
                           pen4, ops=problem.ops)
    _, rep4 = synthesize_null(y0, problem4)
    assert rep4.terminal_ratio <= rep.terminal_ratio


def test_criterion_5_observability_ratio_matches_closed_form(tmp_path):
    out = tmp_path / "obs"
    code = run("audit-observability", REF_CFG,
               overrides=["mesh.n_r=15", "mesh.n_theta=30",
                          "region.g0_radius=0.3", "region.g1_radius=0.15",
                          "coeffs.a1=0.0", "coeffs.B1=0.0,0.0"],
               out=str(out))
    assert code == 0
    lines = (out / "observability.csv").read_text().strip().splitlines()
    ratio = float(lines[1].split(",")[2])
    # closed-form oracle z ≡ 1, Z ≡ 0: (pi + 2 pi) / (T * 0.09 pi)
    assert abs(ratio - 3.0 / 0.09) / (3.0 / 0.09) <= 0.02


def test_criterion_6_carleman_calibration_and_holdout():
    ctx = instantiate(load_config(REF_CFG))
    ops = build_level_operators(ctx.mesh, ctx.coeffs, ctx.tree)
    ws = ctx.weight_set()

    def ratio(seed, scale=1.0):
        rng = np.random.default_rng(seed)
        zT = scale * smoothed_random_terminal(ctx.mesh, ctx.tree, rng)
        bsol = backward_solve(zT, ops)
        return carleman_sides(bsol, ws, ctx.region, "adjoint",
                              ctx.lambda_threshold).ratio

    c_star = max(ratio(s) for s in range(20))
    assert c_star > 0.0
    for s in range(100, 120):
        assert ratio(s) <= 1.5 * c_star
    # the two-sided functional is quadratic: ratios are scale invariant
    r1 = ratio(7)
    r2 = ratio(7, scale=123.456)
    assert abs(r1 - r2) <= 1e-12 * abs(r1)


def test_criterion_7_cost_sweep_slope_nonnegative_and_K_exact(tmp_path):
    out = tmp_path / "sweep"
    assert run("sweep-cost", REF_CFG, out=str(out)) == 0
    rows = (out / "cost_sweep.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == 9
    for line in rows:
        cells = line.split(",")
        T, a1, b1, K = (float(cells[i]) for i in range(4))
        expected = 1.0 + 1.0 / T + a1 ** (2.0 / 3.0) + 0.0 ** (2.0 / 3.0) \
            + T * (a1 + 0.0) + (1.0 + T) * (b1**2 + 0.0**2)
        assert K == expected
        assert cells[7] == "ok"
    fit = (out / "cost_sweep_fit.csv").read_text().strip().splitlines()[1]
    slope = float(fit.split(",")[0])
    assert slope >= 0.0


def test_criterion_8_structural_invariants_at_two_mesh_levels(tmp_path):
    expected = {"S symmetric", "S kernel contains constants",
                "mass conservation", "forward contraction",
                "backward norm monotonicity", "weight boundary constancy",
                "weight bound constants finite", "tower property",
                "Ito isometry", "exact duality", "backward oracle equivalence"}
    for name, n_r, n_theta in (("coarse", 12, 24), ("fine", 16, 32)):
        out = tmp_path / name
        assert run("verify-all", REF_CFG,
                   overrides=[f"mesh.n_r={n_r}", f"mesh.n_theta={n_theta}"],
                   out=str(out)) == 0
        lines = (out / "verify_all.csv").read_text().strip().splitlines()[1:]
        passed = {line.split(",")[0] for line in lines
                  if line.endswith(",pass")}
        assert expected <= passed
