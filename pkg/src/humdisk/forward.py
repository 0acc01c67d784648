"""Semi-implicit tree stepping of the controlled bulk-surface system.

One time step on every tree node at level k solves

    (M + dt (S - C - Rx)) Y_{k+1}^{+-} =
        M Y_k + dt * (w_bulk 1_{G0} u_k + drift sources)
             +- sqrt(dt) * (w_bulk v1_k + w_surf v2_k)

with a fully implicit drift (one sparse factorization per time level,
shared by every node of the level) and explicit, mass-weighted noise.
The same factorizations, transposed, drive the backward solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CoefficientSet, ControlRegion, PolarMesh, SpatialForms, assemble_forms
from .stochastics import AdaptedField, BinomialTree, tree_expectation
from .weights import half_step_times


class StepError(RuntimeError):
    """A time-step linear system could not be factorized."""


@dataclass
class LevelOperators:
    """Per-level implicit-Euler operators and their factorizations."""

    mesh: PolarMesh
    tree: BinomialTree
    times: np.ndarray                  # (n_t,) half-step sample times
    forms: list[SpatialForms]
    E: list[sp.csc_matrix]             # E_k = M + dt (S - C - Rx)
    lu: list[spla.SuperLU]             # factorization of E_k
    lu_t: list[spla.SuperLU]           # factorization of E_k^T

    @property
    def M(self) -> np.ndarray:
        return self.forms[0].M

    def solve(self, k: int, rhs: np.ndarray) -> np.ndarray:
        """Solve E_k x = rhs for row-stacked right-hand sides."""
        return self.lu[k].solve(rhs.T).T

    def solve_t(self, k: int, rhs: np.ndarray) -> np.ndarray:
        """Solve E_k^T x = rhs for row-stacked right-hand sides."""
        return self.lu_t[k].solve(rhs.T).T


def build_level_operators(mesh: PolarMesh, coeffs: CoefficientSet,
                          tree: BinomialTree,
                          include_lower_order: bool = True) -> LevelOperators:
    """Assemble and factorize E_k = M + dt (S - C - Rx) at every half-step.

    With include_lower_order=False the convection and reaction terms are
    dropped (pure diffusion operator), which is what the explicit-source
    backward systems use.
    """
    times = half_step_times(tree.T, tree.n_t)
    dt = tree.dt

    norms = coeffs.sup_norms(mesh, times)
    dr = mesh.R / mesh.n_r
    if include_lower_order and dr * max(norms["B1"], norms["B2"]) / coeffs.beta0 > 2.0:
        warnings.warn(
            "cell Peclet number exceeds 2; centered convection may oscillate",
            RuntimeWarning,
        )

    forms, mats, lus, lus_t = [], [], [], []
    for t in times:
        f = assemble_forms(mesh, coeffs, float(t))
        E = sp.diags(f.M) + dt * f.S
        if include_lower_order:
            E = E - dt * f.C - dt * sp.diags(f.Rx)
        E = E.tocsc()
        try:
            lu = spla.splu(E)
            lu_t = spla.splu(E.T.tocsc())
        except RuntimeError as exc:
            raise StepError(f"singular time-step system at t={t:.4g}: {exc}") from exc
        forms.append(f)
        mats.append(E)
        lus.append(lu)
        lus_t.append(lu_t)
    return LevelOperators(mesh=mesh, tree=tree, times=times,
                          forms=forms, E=mats, lu=lus, lu_t=lus_t)


class ControlTriple:
    """Controls (u, v1, v2): distributed drift control on G0, bulk noise
    control, and surface noise control.  All stored full-dof; u is masked
    by the G0 indicator and v2 by the boundary, structurally."""

    def __init__(self, u: AdaptedField, v1: AdaptedField, v2: AdaptedField,
                 region: ControlRegion, mesh: PolarMesh):
        self.region = region
        self.mesh = mesh
        self._bmask = np.zeros(mesh.n_dof)
        self._bmask[mesh.boundary] = 1.0
        for k in range(u.last_level + 1):
            u[k] = u[k] * region.indicator
            v2[k] = v2[k] * self._bmask
        self.u = u
        self.v1 = v1
        self.v2 = v2

    @staticmethod
    def zeros(tree: BinomialTree, mesh: PolarMesh, region: ControlRegion,
              last_level: int | None = None) -> "ControlTriple":
        if last_level is None:
            last_level = tree.n_t - 1   # controls act on steps, not at T
        mk = lambda: AdaptedField(tree, mesh.n_dof, last_level=last_level)
        return ControlTriple(mk(), mk(), mk(), region, mesh)

    def copy(self) -> "ControlTriple":
        return ControlTriple(self.u.copy(), self.v1.copy(), self.v2.copy(),
                             self.region, self.mesh)


@dataclass
class ForwardSolution:
    y: AdaptedField          # trajectory over all tree levels
    ops: LevelOperators

    def terminal(self) -> np.ndarray:
        return self.y[self.ops.tree.n_t]


def forward_step(ops: LevelOperators, k: int, y_level: np.ndarray,
                 drift_extra: np.ndarray | None = None,
                 u: np.ndarray | None = None,
                 v1: np.ndarray | None = None,
                 v2: np.ndarray | None = None) -> np.ndarray:
    """Advance all 2^k level-k states one step; returns the 2^{k+1} children.

    Children are interleaved: rows 2i (up move) and 2i+1 (down move) descend
    from row i.  drift_extra is an already mass-weighted source vector.
    """
    mesh, tree = ops.mesh, ops.tree
    dt, sd = tree.dt, tree.sqrt_dt
    rhs = ops.M * y_level
    if u is not None:
        rhs = rhs + dt * (mesh.w_bulk * u)
    if drift_extra is not None:
        rhs = rhs + dt * drift_extra
    noise = np.zeros_like(rhs)
    if v1 is not None:
        noise = noise + mesh.w_bulk * v1
    if v2 is not None:
        noise = noise + mesh.w_surf_full * v2
    up = ops.solve(k, rhs + sd * noise)
    down = ops.solve(k, rhs - sd * noise)
    children = np.empty((2 * y_level.shape[0], y_level.shape[1]))
    children[0::2] = up
    children[1::2] = down
    return children


def forward_solve(y0: np.ndarray, controls: ControlTriple | None,
                  ops: LevelOperators,
                  source: AdaptedField | None = None,
                  source_surf: AdaptedField | None = None) -> ForwardSolution:
    """Run the controlled system from deterministic y0 over the whole tree.

    source / source_surf are optional extra drift fields (bulk-weighted and
    surface-weighted respectively), given per level like the controls.
    """
    tree, mesh = ops.tree, ops.mesh
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (mesh.n_dof,):
        raise ValueError(f"y0 must have {mesh.n_dof} entries")
    y = AdaptedField(tree, mesh.n_dof)
    y[0] = y0[None, :]
    for k in range(tree.n_t):
        drift = None
        if source is not None:
            drift = mesh.w_bulk * source[k]
        if source_surf is not None:
            extra = mesh.w_surf_full * source_surf[k]
            drift = extra if drift is None else drift + extra
        y[k + 1] = forward_step(
            ops, k, y[k],
            drift_extra=drift,
            u=controls.u[k] if controls is not None else None,
            v1=controls.v1[k] if controls is not None else None,
            v2=controls.v2[k] if controls is not None else None,
        )
    return ForwardSolution(y=y, ops=ops)


def msq_norm(M: np.ndarray, level: np.ndarray) -> float:
    """Expected squared M-weighted norm of one level."""
    return float(tree_expectation(np.sum(M * level * level, axis=-1)))


@dataclass
class TerminalRatio:
    value: float
    flagged: bool      # True when y0 = 0 and the absolute norm is reported


def terminal_ratio(sol: ForwardSolution, y0: np.ndarray) -> TerminalRatio:
    """E ||Y(T)||_M^2 / ||Y(0)||_M^2, or the absolute norm when y0 = 0."""
    M = sol.ops.M
    y0 = np.asarray(y0, dtype=float)
    denom = float(np.sum(M * y0 * y0))
    num = msq_norm(M, sol.terminal())
    if denom == 0.0:
        return TerminalRatio(value=num, flagged=True)
    return TerminalRatio(value=num / denom, flagged=False)


def control_squared_norm(controls: ControlTriple, ops: LevelOperators) -> float:
    """Unweighted control cost: sum_k dt E[||u||^2_w + ||v1||^2_w + ||v2||^2_s]."""
    mesh, dt = ops.mesh, ops.tree.dt
    total = 0.0
    for k in range(controls.u.last_level + 1):
        total += dt * float(tree_expectation(
            np.sum(mesh.w_bulk * controls.u[k] ** 2, axis=-1)
            + np.sum(mesh.w_bulk * controls.v1[k] ** 2, axis=-1)
            + np.sum(mesh.w_surf_full * controls.v2[k] ** 2, axis=-1)
        ))
    return total


def energy_report(sol: ForwardSolution,
                  controls: ControlTriple | None = None) -> dict[str, float]:
    """Supremum energy, dissipation integral, and their ratio to the data."""
    ops = sol.ops
    M, dt = ops.M, ops.tree.dt
    sup_e = 0.0
    sup_level = 0
    h1 = 0.0
    for k in range(ops.tree.n_t + 1):
        e = msq_norm(M, sol.y[k])
        if e > sup_e:
            sup_e, sup_level = e, k
        if k < ops.tree.n_t:
            Sy = (ops.forms[k].S @ sol.y[k].T).T
            h1 += dt * float(tree_expectation(np.sum(sol.y[k] * Sy, axis=-1)))
    data = msq_norm(M, sol.y[0])
    if controls is not None:
        data += control_squared_norm(controls, ops)
    ratio = (sup_e + h1) / data if data > 0 else 0.0
    return {
        "sup_energy": sup_e,
        "sup_level": float(sup_level),
        "h1_energy": h1,
        "data_norm": data,
        "ratio": ratio,
    }
