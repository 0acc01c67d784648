"""Penalized control synthesis by conjugate gradient.

The penalized functional over control triples c = (u, v1, v2) is

    J(c) = 1/2 <c, D c>  +  1/2 sum_k dt E|| s_k^{1/2} y_{k+1} ||_m^2
         + 1/(2 eps) E|| y(T) - target ||_M^2,

where D carries the inverse Carleman weights
(lambda^-3 mu^-4 theta_eps^-2 phi^-3 on u, lambda^-2 mu^-2 theta_eps^-2
phi^-2 on v1 and v2), s_k = theta_eps^-2(t_k) is the state weight, and
y is the forward trajectory driven by c.  The gradient is exact for the
discrete dynamics: one backward solve with terminal (1/eps)(y_T - target)
and child-indexed source m s_k y_{k+1} yields

    grad = (D_u u + 1_{G0} z,  D_1 v1 + Zt,  D_2 v2 + Zt|_Gamma).

Because the weights span hundreds of orders of magnitude, the quadratic
system H c = -grad(0) is solved by CG in the whitened variable
c_hat = D^{1/2} c, where the operator is the identity plus the whitened
state/terminal coupling and every component is individually well scaled;
a single global rescaling of the right-hand side keeps squared norms
inside the float range.

The approximate-controllability variant drops the Carleman weighting and
the state term (D = identity), keeping only the terminal penalty toward
the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import backward_solve
from .forward import (ControlTriple, LevelOperators, build_level_operators,
                      control_squared_norm, forward_solve, msq_norm,
                      terminal_ratio)
from .mesh import CoefficientSet, ControlRegion, PolarMesh
from .stochastics import AdaptedField, BinomialTree, tree_expectation
from .weights import WeightSet, cost_factor_K, min_lambda_adjoint


class ThresholdError(ValueError):
    """The Carleman parameter lambda sits below the admissible threshold."""


@dataclass
class PenaltyConfig:
    eps: float = 1e-6          # terminal penalty weight 1/(2 eps)
    eps_reg: float = 2.0       # regularization of the weight theta_eps
    cg_tol: float = 1e-13      # relative residual tolerance (whitened frame)
    cg_max_iter: int = 4000

    def __post_init__(self):
        if self.eps <= 0 or self.eps_reg <= 0 or self.cg_tol <= 0:
            raise ValueError("eps, eps_reg and cg_tol must be positive")


@dataclass
class HumReport:
    iterations: int
    converged: bool
    final_gradient_norm: float
    terminal_ratio: float
    terminal_flagged: bool
    control_cost: float        # unweighted squared norms
    weighted_cost: float       # the D-weighted control part of J
    jeps_value: float
    K: float
    effective_C: float         # log(control_cost / ||y0||^2) / K
    stationarity_residual: float
    j_values: list[float] = field(default_factory=list)

    def as_text(self) -> str:
        pairs = [
            ("iterations", self.iterations),
            ("converged", self.converged),
            ("final_gradient_norm", self.final_gradient_norm),
            ("terminal_ratio", self.terminal_ratio),
            ("terminal_flagged", self.terminal_flagged),
            ("control_cost", self.control_cost),
            ("weighted_cost", self.weighted_cost),
            ("jeps_value", self.jeps_value),
            ("K", self.K),
            ("effective_C", self.effective_C),
            ("stationarity_residual", self.stationarity_residual),
        ]
        return "\n".join(f"{k} = {v}" for k, v in pairs)


class _CVec:
    """Raw control iterate: per-level arrays for the three channels."""

    __slots__ = ("u", "v1", "v2")

    def __init__(self, u, v1, v2):
        self.u, self.v1, self.v2 = u, v1, v2

    @staticmethod
    def zeros(tree: BinomialTree, n_dof: int) -> "_CVec":
        mk = lambda: [np.zeros((2**k, n_dof)) for k in range(tree.n_t)]
        return _CVec(mk(), mk(), mk())

    def axpy(self, a: float, other: "_CVec") -> "_CVec":
        add = lambda xs, ys: [x + a * y for x, y in zip(xs, ys)]
        return _CVec(add(self.u, other.u), add(self.v1, other.v1),
                     add(self.v2, other.v2))

    def scaled(self, a: float) -> "_CVec":
        sc = lambda xs: [a * x for x in xs]
        return _CVec(sc(self.u), sc(self.v1), sc(self.v2))


class JepsProblem:
    """Shared context for one synthesis configuration."""

    def __init__(self, mesh: PolarMesh, region: ControlRegion,
                 coeffs: CoefficientSet, ws: WeightSet, tree: BinomialTree,
                 pen: PenaltyConfig, ops: LevelOperators | None = None,
                 enforce_threshold: bool = True):
        self.mesh = mesh
        self.region = region
        self.coeffs = coeffs
        self.ws = ws
        self.tree = tree
        self.pen = pen
        self.ops = ops if ops is not None else \
            build_level_operators(mesh, coeffs, tree)
        norms = coeffs.sup_norms(mesh, self.ops.times)
        self.norms = norms
        self.lambda_min = min_lambda_adjoint(tree.T, norms)
        if enforce_threshold and ws.lam < self.lambda_min:
            raise ThresholdError(
                f"lambda={ws.lam:.4g} below adjoint threshold "
                f"{self.lambda_min:.4g}"
            )
        if abs(pen.eps_reg - ws.eps_reg) > 1e-12 * max(1.0, ws.eps_reg):
            raise ValueError(
                f"penalty eps_reg={pen.eps_reg} disagrees with the weight "
                f"set's eps_reg={ws.eps_reg}"
            )
        n_t = tree.n_t
        lam, mu = ws.lam, ws.mu
        # Diagonal control weights.  The same regularized theta_eps is used
        # here as in the state term: the unregularized theta saturates the
        # exponent guard for moderate lambda, and clipping destroys the
        # state-to-control weight ratios the optimality system relies on.
        # Inverses are exact reciprocals so the optimality relations hold
        # to rounding.
        self.d_u = [ws.pow_product(k, -2, -3, regularized=True)
                    / (lam**3 * mu**4) for k in range(n_t)]
        self.d_v = [ws.pow_product(k, -2, -2, regularized=True)
                    / (lam**2 * mu**2) for k in range(n_t)]
        # Normalize so the cheapest control weight is exactly 1.  The
        # weighted norm is only defined up to a constant (absorbing it into
        # the penalty parameter), and without this the absolute weight scale
        # grows like exp(lambda), making the terminal penalty invisible for
        # large lambda.
        self.weight_scale = float(min(min(d.min() for d in self.d_u),
                                      min(d.min() for d in self.d_v)))
        self.d_u = [d / self.weight_scale for d in self.d_u]
        self.d_v = [d / self.weight_scale for d in self.d_v]
        self.inv_d_u = [1.0 / d for d in self.d_u]
        self.inv_d_v = [1.0 / d for d in self.d_v]
        m = mesh.mass
        self.state_w = [m * _theta_eps_m2(ws, k) for k in range(n_t)]
        # Square roots of the diagonal weights for the whitened CG variable,
        # taken from the clipped diagonals so both frames see one functional.
        self.sq_du = [np.sqrt(d) for d in self.d_u]
        self.sq_dv = [np.sqrt(d) for d in self.d_v]
        self.sq_iu = [1.0 / d for d in self.sq_du]
        self.sq_iv = [1.0 / d for d in self.sq_dv]
        self._bmask = np.zeros(mesh.n_dof)
        self._bmask[mesh.boundary] = 1.0

    # ---- control-space geometry -------------------------------------
    def dot(self, a: _CVec, b: _CVec, pre_u=None, pre_v=None) -> float:
        """Weighted control inner product; optional diagonal applied to one
        factor channelwise before summation (overflow-safe ordering)."""
        mesh, dt = self.mesh, self.tree.dt
        total = 0.0
        for k in range(self.tree.n_t):
            au = a.u[k] * pre_u[k] if pre_u is not None else a.u[k]
            av1 = a.v1[k] * pre_v[k] if pre_v is not None else a.v1[k]
            av2 = a.v2[k] * pre_v[k] if pre_v is not None else a.v2[k]
            total += dt * float(tree_expectation(
                np.sum(mesh.w_bulk * au * b.u[k], axis=-1)
                + np.sum(mesh.w_bulk * av1 * b.v1[k], axis=-1)
                + np.sum(mesh.w_surf_full * av2 * b.v2[k], axis=-1)))
        return total

    def _triple(self, c: _CVec) -> ControlTriple:
        tree, mesh = self.tree, self.mesh
        n = mesh.n_dof
        fu = AdaptedField(tree, n, levels=[x.copy() for x in c.u])
        f1 = AdaptedField(tree, n, levels=[x.copy() for x in c.v1])
        f2 = AdaptedField(tree, n, levels=[x.copy() for x in c.v2])
        return ControlTriple(fu, f1, f2, self.region, mesh)

    # ---- functional and gradient ------------------------------------
    def gradient(self, c: _CVec, y0: np.ndarray,
                 target: np.ndarray | None,
                 weighted: bool = True,
                 want_value: bool = False):
        """Exact gradient of J at c; optionally also the value."""
        tree, mesh, pen = self.tree, self.mesh, self.pen
        sol = forward_solve(y0, self._triple(c), self.ops)
        n_t = tree.n_t
        yT = sol.y[n_t]
        mis = yT - target if target is not None else yT
        child = None
        if weighted:
            child = AdaptedField(tree, mesh.n_dof)
            for k in range(n_t):
                child[k + 1] = self.state_w[k] * sol.y[k + 1]
        bsol = backward_solve(mis / pen.eps, self.ops, child_source=child)
        ind, bm = self.region.indicator, self._bmask
        gu, gv1, gv2 = [], [], []
        for k in range(n_t):
            if weighted:
                gu.append(ind * (self.d_u[k] * c.u[k] + bsol.z[k]))
                gv1.append(self.d_v[k] * c.v1[k] + bsol.Zt[k])
                gv2.append(bm * (self.d_v[k] * c.v2[k] + bsol.Zt[k]))
            else:
                gu.append(ind * (c.u[k] + bsol.z[k]))
                gv1.append(c.v1[k] + bsol.Zt[k])
                gv2.append(bm * (c.v2[k] + bsol.Zt[k]))
        g = _CVec(gu, gv1, gv2)
        if not want_value:
            return g, sol, bsol
        val = 0.5 * self.control_energy(c, weighted)
        if weighted:
            for k in range(n_t):
                val += 0.5 * tree.dt * float(tree_expectation(
                    np.sum(self.state_w[k] * sol.y[k + 1] ** 2, axis=-1)))
        val += 0.5 / pen.eps * float(tree_expectation(
            np.sum(self.ops.M * mis * mis, axis=-1)))
        return g, sol, bsol, val

    def value(self, c: _CVec, y0: np.ndarray, target: np.ndarray | None,
              weighted: bool = True) -> float:
        *_, val = self.gradient(c, y0, target, weighted, want_value=True)
        return val

    def control_energy(self, c: _CVec, weighted: bool) -> float:
        """<c, D c> with the masked channels."""
        if weighted:
            return self.dot(c, _CVec(
                [self.region.indicator * x for x in c.u],
                list(c.v1),
                [self._bmask * x for x in c.v2]),
                pre_u=self.d_u, pre_v=self.d_v)
        return self.dot(c, _CVec(
            [self.region.indicator * x for x in c.u],
            list(c.v1),
            [self._bmask * x for x in c.v2]))

    def apply_H(self, p: _CVec, weighted: bool) -> _CVec:
        """Hessian product: gradient of J at p with homogeneous data."""
        g, *_ = self.gradient(p, np.zeros(self.mesh.n_dof), None, weighted)
        return g

    # ---- the CG driver ----------------------------------------------
    def whiten(self, c: _CVec, weighted: bool, inverse: bool = False) -> _CVec:
        """Map between physical controls c and whitened variables D^{1/2} c."""
        if not weighted:
            return _CVec(list(c.u), list(c.v1), list(c.v2))
        fu = self.sq_iu if inverse else self.sq_du
        fv = self.sq_iv if inverse else self.sq_dv
        return _CVec([f * x for f, x in zip(fu, c.u)],
                     [f * x for f, x in zip(fv, c.v1)],
                     [f * x for f, x in zip(fv, c.v2)])

    def _adjoint_term(self, c: _CVec, y0: np.ndarray,
                      target: np.ndarray | None, weighted: bool) -> _CVec:
        """The non-diagonal gradient part (1_{G0} z, Zt, Zt|_Gamma) at c."""
        tree, mesh, pen = self.tree, self.mesh, self.pen
        sol = forward_solve(y0, self._triple(c), self.ops)
        n_t = tree.n_t
        mis = sol.y[n_t] - target if target is not None else sol.y[n_t]
        child = None
        if weighted:
            child = AdaptedField(tree, mesh.n_dof)
            for k in range(n_t):
                child[k + 1] = self.state_w[k] * sol.y[k + 1]
        bsol = backward_solve(mis / pen.eps, self.ops, child_source=child)
        ind, bm = self.region.indicator, self._bmask
        return _CVec([ind * bsol.z[k] for k in range(n_t)],
                     [bsol.Zt[k].copy() for k in range(n_t)],
                     [bm * bsol.Zt[k] for k in range(n_t)])

    def minimize(self, y0: np.ndarray, target: np.ndarray | None,
                 weighted: bool = True):
        """CG in the whitened control variable.

        Returns (c, iterations, converged, relres, model_values).

        With u_hat = D^{1/2} u the quadratic system is
        (I + D^{-1/2} K D^{-1/2}) u_hat = -D^{-1/2} grad(0), whose operator
        is a modest perturbation of the identity; one additional global
        rescaling keeps squared norms inside the float range.
        """
        pen, tree = self.pen, self.tree
        zeros = _CVec.zeros(tree, self.mesh.n_dof)
        b = self.whiten(self._adjoint_term(zeros, y0, target, weighted),
                        weighted, inverse=True)
        m1 = max(max((float(np.max(np.abs(a))) for a in ch), default=0.0)
                 for ch in (b.u, b.v1, b.v2))
        if m1 == 0.0 or not np.isfinite(m1):
            return zeros, 0, m1 == 0.0, 0.0 if m1 == 0.0 else float("inf"), []

        def apply_hat(p: _CVec) -> _CVec:
            c = self.whiten(p, weighted, inverse=True)
            a = self._adjoint_term(c, np.zeros(self.mesh.n_dof), None, weighted)
            return p.axpy(1.0, self.whiten(a, weighted, inverse=True))

        x = zeros
        rhs = b.scaled(-1.0 / m1)
        r = rhs
        rr = self.dot(r, r)
        rr0 = rr
        p = r
        rel = 1.0
        it = 0
        jvals: list[float] = []
        for it in range(1, pen.cg_max_iter + 1):
            hp = apply_hat(p)
            php = self.dot(p, hp)
            if not np.isfinite(php) or php <= 0:
                break
            alpha = rr / php
            x = x.axpy(alpha, p)
            r = r.axpy(-alpha, hp)
            # Quadratic model value 1/2 x'Hx - rhs'x = -1/2 x'(rhs + r);
            # strictly decreasing along exact CG on a convex quadratic.
            jvals.append(-0.5 * self.dot(x, rhs.axpy(1.0, r)))
            rr_new = self.dot(r, r)
            rel = float(np.sqrt(max(rr_new, 0.0) / rr0))
            if rel <= pen.cg_tol:
                rr = rr_new
                break
            beta = rr_new / rr
            rr = rr_new
            p = r.axpy(beta, p)
        # Unscale inside the whitened frame first, then undo the whitening.
        c = self.whiten(x.scaled(m1), weighted, inverse=True)
        return c, it, rel <= pen.cg_tol, rel, jvals


def _theta_eps_m2(ws: WeightSet, k: int) -> np.ndarray:
    """theta_eps^{-2} at time sample k, overflow-guarded."""
    from .weights import exp_clip
    flag: list = []
    out = exp_clip(-2.0 * ws.lam * ws.alpha_eps[k], flag)
    if flag:
        ws.clipped = True
    return out


def jeps_value_and_gradient(controls: ControlTriple, y0: np.ndarray,
                            problem: JepsProblem
                            ) -> tuple[float, ControlTriple]:
    """Value and gradient of the penalized functional at the given controls."""
    c = _CVec([controls.u[k] for k in range(problem.tree.n_t)],
              [controls.v1[k] for k in range(problem.tree.n_t)],
              [controls.v2[k] for k in range(problem.tree.n_t)])
    g, _sol, _bsol, val = problem.gradient(c, y0, None, weighted=True,
                                           want_value=True)
    return val, problem._triple(g)


def _report(problem: JepsProblem, c: _CVec, y0: np.ndarray,
            target: np.ndarray | None, weighted: bool,
            iterations: int, converged: bool, relres: float,
            j_values: list[float] | None = None) -> HumReport:
    triple = problem._triple(c)
    sol = forward_solve(y0, triple, problem.ops)
    tr = terminal_ratio(sol, y0)
    cost = control_squared_norm(triple, problem.ops)
    wcost = problem.control_energy(c, weighted)
    g, _s, bsol, jval = problem.gradient(c, y0, target, weighted,
                                         want_value=True)
    # Stationarity of the optimality relation u = -1_{G0} inv(D_u) z,
    # measured in the norm of the weighted control space.  In that metric
    # the residual is sqrt(D_u) u + sqrt(inv D_u) z, which stays inside the
    # float range after one global rescaling; the raw pointwise relation
    # spans more orders of magnitude than a double can hold.
    mesh, dt = problem.mesh, problem.tree.dt
    ind = problem.region.indicator
    res_k, ctl_k = [], []
    for k in range(problem.tree.n_t):
        squ = problem.sq_du[k] if weighted else 1.0
        sqi = problem.sq_iu[k] if weighted else 1.0
        ctl_k.append(squ * c.u[k])
        res_k.append(ctl_k[-1] + sqi * (ind * bsol.z[k]))
    scale = max(max((float(np.max(np.abs(a))) for a in arrs), default=0.0)
                for arrs in (res_k, ctl_k))
    num = den = 0.0
    if scale > 0:
        for r, cu in zip(res_k, ctl_k):
            r, cu = r / scale, cu / scale
            num += dt * float(tree_expectation(
                np.sum(mesh.w_bulk * r * r, axis=-1)))
            den += dt * float(tree_expectation(
                np.sum(mesh.w_bulk * cu * cu, axis=-1)))
    if den > 0:
        stat = float(np.sqrt(num / den))
    else:
        stat = 0.0 if num == 0.0 else float("inf")
    y0n = float(np.sum(problem.ops.M * np.asarray(y0) ** 2))
    kf = cost_factor_K(problem.tree.T, problem.norms)
    eff_c = float(np.log(cost / y0n) / kf.K) if cost > 0 and y0n > 0 else float("nan")
    return HumReport(
        iterations=iterations, converged=converged,
        final_gradient_norm=relres,
        terminal_ratio=tr.value, terminal_flagged=tr.flagged,
        control_cost=cost, weighted_cost=wcost, jeps_value=jval,
        K=kf.K, effective_C=eff_c, stationarity_residual=stat,
        j_values=list(j_values) if j_values is not None else [],
    )


def synthesize_null(y0: np.ndarray, problem: JepsProblem
                    ) -> tuple[ControlTriple, HumReport]:
    """Minimize the weighted penalized functional driving y(T) toward zero."""
    y0 = np.asarray(y0, dtype=float)
    c, it, converged, rel, jvals = problem.minimize(y0, None, weighted=True)
    report = _report(problem, c, y0, None, True, it, converged, rel, jvals)
    return problem._triple(c), report


def synthesize_approximate(y0: np.ndarray, target: np.ndarray,
                           problem: JepsProblem
                           ) -> tuple[ControlTriple, dict]:
    """Steer E||y(T) - target||^2 below the penalty scale.

    Unweighted control norms and no state term: the functional is
    1/2 ||c||^2 + 1/(2 eps) E||y(T) - target||_M^2 with an F_T-measurable
    (leaf-indexed) target.
    """
    tree, mesh = problem.tree, problem.mesh
    y0 = np.asarray(y0, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.shape != (2**tree.n_t, mesh.n_dof):
        raise ValueError("target must be leaf-indexed (F_T-measurable)")
    c, it, converged, rel, jvals = problem.minimize(y0, target, weighted=False)
    triple = problem._triple(c)
    sol = forward_solve(y0, triple, problem.ops)
    dist = float(tree_expectation(
        np.sum(problem.ops.M * (sol.y[tree.n_t] - target) ** 2, axis=-1)))
    report = {
        "iterations": it,
        "converged": converged,
        "final_gradient_norm": rel,
        "achieved_distance": dist,
        "control_cost": control_squared_norm(triple, problem.ops),
        "eps": problem.pen.eps,
        "j_values": jvals,
    }
    return triple, report


COST_SWEEP_HEADER = ["T", "a1_norm", "B1_norm", "K", "control_cost",
                     "terminal_ratio", "iterations", "status"]


def sweep_cost(T_list, a1_list, make_problem, y0_of_mesh) -> tuple[list[dict], dict]:
    """Run null synthesis over a (T, a1) grid and fit log-cost against K.

    make_problem(T, a1) -> JepsProblem; y0_of_mesh(mesh) -> initial state.
    Per-point failures are recorded in the row and the sweep continues.
    """
    rows: list[dict] = []
    for T in T_list:
        for a1 in a1_list:
            row = {"T": T, "a1_norm": a1, "B1_norm": None, "K": None,
                   "control_cost": None, "terminal_ratio": None,
                   "iterations": None, "status": "ok"}
            try:
                problem = make_problem(T, a1)
                row["B1_norm"] = problem.norms["B1"]
                row["K"] = cost_factor_K(T, problem.norms).K
                y0 = y0_of_mesh(problem.mesh)
                _, rep = synthesize_null(y0, problem)
                row["control_cost"] = rep.control_cost
                row["terminal_ratio"] = rep.terminal_ratio
                row["iterations"] = rep.iterations
                y0n = float(np.sum(problem.ops.M * y0**2))
                row["log_cost_ratio"] = float(np.log(rep.control_cost / y0n)) \
                    if rep.control_cost > 0 else None
            except Exception as exc:  # recorded, sweep continues
                row["status"] = f"error: {exc}"
            rows.append(row)
    pts = [(r["K"], r["log_cost_ratio"]) for r in rows
           if r["status"] == "ok" and r.get("log_cost_ratio") is not None]
    fit = {"slope": float("nan"), "intercept": float("nan"),
           "residual": float("nan"), "points": len(pts)}
    if len(pts) >= 2:
        ks = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        coef, res, *_ = np.polyfit(ks, ys, 1, full=True)
        fit["slope"] = float(coef[0])
        fit["intercept"] = float(coef[1])
        fit["residual"] = float(res[0]) if len(res) else 0.0
    return rows, fit
