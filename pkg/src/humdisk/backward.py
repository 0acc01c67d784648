"""Backward (terminal-value) systems on the tree, as the exact discrete
adjoint of the forward stepper.

The recursion at level k, with E_k the forward step operator and
X^s = M z_{k+1}^s + dt G_{k+1}^s over the two children s, is

    E_k^T z_k       = cond_expect(X) - dt f_weak(k)
    E_k^T Ztilde_k  = martingale_part(X)

where f_weak carries explicit drift sources (weak-divergence vector
sources enter through the transposed gradient) and G is an optional
child-indexed, already quadrature-weighted random source.  This choice
makes the discrete duality identity exact: for any controls and any
terminal data,

    E<M Y_T, z_T> - <M Y_0, z_0> =
        sum_k dt E[ <u_k, z_k>_{w,G0} + <v1_k, Zt_k>_w + <v2_k, Zt_k>_s ].

Two operator modes are selected by how the level operators were built:
with lower-order terms included, the transposed solve realizes the
reaction/convection drift (-a1 z + div(z B1), and the surface analog)
implicitly; without them, drift enters only through explicit sources.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forward import LevelOperators
from .mesh import PolarMesh
from .stochastics import AdaptedField, cond_expect, martingale_part, tree_expectation

# A source sampler: called with (k, t), returns the field at that level.
Sampler = Callable[[int, float], np.ndarray]


@dataclass
class BackwardSources:
    """Explicit drift sources F1, F2 and weak-divergence sources F, F_Gamma.

    Each entry is None or a sampler (k, t) -> array:
      F1: (n_dof,) bulk drift; F2: (n_theta,) surface drift;
      Fvec: (n_el, 2) bulk vector field entering as div F;
      Fsurf: (n_theta,) tangential surface field entering as div_Gamma F_Gamma.
    """

    F1: Sampler | None = None
    F2: Sampler | None = None
    Fvec: Sampler | None = None
    Fsurf: Sampler | None = None

    def weak_vector(self, mesh: PolarMesh, k: int, t: float) -> np.ndarray | None:
        out = None
        if self.F1 is not None:
            f1 = np.asarray(self.F1(k, t), dtype=float)
            if f1.shape != (mesh.n_dof,):
                raise ValueError("F1 sample must be dof-sized")
            out = mesh.w_bulk * f1
        if self.F2 is not None:
            f2 = np.asarray(self.F2(k, t), dtype=float)
            if f2.shape != (mesh.n_theta,):
                raise ValueError("F2 sample must be boundary-sized")
            v = np.zeros(mesh.n_dof)
            v[mesh.boundary] = mesh.w_surf * f2
            out = v if out is None else out + v
        if self.Fvec is not None:
            fv = np.asarray(self.Fvec(k, t), dtype=float)
            if fv.shape != (mesh.n_el, 2):
                raise ValueError("Fvec sample must be (n_el, 2)")
            v = -(mesh.grad.T @ (mesh.w_el[:, None] * fv).ravel())
            out = v if out is None else out + v
        if self.Fsurf is not None:
            fs = np.asarray(self.Fsurf(k, t), dtype=float)
            if fs.shape != (mesh.n_theta,):
                raise ValueError("Fsurf sample must be boundary-sized")
            v = -(mesh.surf_grad.T @ (mesh.w_edge * fs))
            out = v if out is None else out + v
        return out


@dataclass
class BackwardSolution:
    z: AdaptedField          # levels 0..n_t
    Zt: AdaptedField         # dW-integrand, levels 0..n_t-1, full dof
    ops: LevelOperators
    report: dict[str, float]

    def Zs(self, k: int) -> np.ndarray:
        """Surface part of the dW-integrand at level k (boundary columns)."""
        return self.Zt[k][:, self.ops.mesh.boundary]


def backward_step(ops: LevelOperators, k: int, z_children: np.ndarray,
                  f_weak: np.ndarray | None = None,
                  child_source: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """One backward level: children (2^{k+1}, n) -> (z_k, Ztilde_k)."""
    if z_children.shape[0] != 2 ** (k + 1):
        raise ValueError(f"expected {2**(k+1)} children at level {k}")
    X = ops.M * z_children
    if child_source is not None:
        X = X + ops.tree.dt * child_source
    ce = cond_expect(X)
    if f_weak is not None:
        ce = ce - ops.tree.dt * f_weak
    z = ops.solve_t(k, ce)
    Zt = ops.solve_t(k, martingale_part(X, ops.tree.dt))
    return z, Zt


def backward_solve(zT: np.ndarray, ops: LevelOperators,
                   sources: BackwardSources | None = None,
                   child_source: AdaptedField | None = None
                   ) -> BackwardSolution:
    """Solve the terminal-value system; zT is leaf-indexed (2^{n_t}, n_dof)."""
    tree, mesh = ops.tree, ops.mesh
    zT = np.asarray(zT, dtype=float)
    if zT.shape != (2**tree.n_t, mesh.n_dof):
        raise ValueError(
            f"terminal data must be leaf-indexed with shape "
            f"{(2**tree.n_t, mesh.n_dof)}, got {zT.shape}"
        )
    z = AdaptedField(tree, mesh.n_dof)
    Zt = AdaptedField(tree, mesh.n_dof, last_level=tree.n_t - 1)
    z[tree.n_t] = zT
    for k in range(tree.n_t - 1, -1, -1):
        fw = sources.weak_vector(mesh, k, float(ops.times[k])) \
            if sources is not None else None
        cs = child_source[k + 1] if child_source is not None else None
        z[k], Zt[k] = backward_step(ops, k, z[k + 1], f_weak=fw, child_source=cs)

    # Well-posedness record: solution energy against the terminal data.
    # Squares of extreme weighted solutions may saturate to inf; the record
    # is diagnostic only, so that is tolerated silently.
    M = ops.M
    with np.errstate(over="ignore"):
        term = float(tree_expectation(np.sum(M * zT * zT, axis=-1)))
        sup_e = max(
            float(tree_expectation(np.sum(M * z[k] ** 2, axis=-1)))
            for k in range(tree.n_t + 1)
        )
        z_int = sum(
            ops.tree.dt * float(tree_expectation(np.sum(M * Zt[k] ** 2, axis=-1)))
            for k in range(tree.n_t)
        )
    report = {
        "terminal_norm": term,
        "sup_energy": sup_e,
        "z_integral": z_int,
        "ratio": (sup_e + z_int) / term if term > 0 else 0.0,
    }
    return BackwardSolution(z=z, Zt=Zt, ops=ops, report=report)


def oracle_backward_dense(zT: np.ndarray, ops: LevelOperators,
                          sources: BackwardSources | None = None,
                          child_source: AdaptedField | None = None
                          ) -> BackwardSolution:
    """Brute-force validator: one dense coupled solve over all tree nodes.

    Unknowns are z at every node and Ztilde at every non-leaf node; the
    equations are the per-child relations

        M z^s + dt G^s - E^T z_parent - s sqrt(dt) E^T Zt_parent = dt f_weak

    plus the leaf conditions z_leaf = zT.  Small instances only.
    """
    tree, mesh = ops.tree, ops.mesh
    n, n_t = mesh.n_dof, tree.n_t
    if n_t > 4 or n > 40:
        raise ValueError("dense oracle limited to n_t <= 4 and n_dof <= 40")
    zT = np.asarray(zT, dtype=float)
    if zT.shape != (2**n_t, n):
        raise ValueError("terminal data shape mismatch")
    dt, sd = tree.dt, tree.sqrt_dt

    # Unknown layout: z blocks level-major, then Ztilde blocks level-major.
    z_off = {}
    pos = 0
    for k in range(n_t + 1):
        z_off[k] = pos
        pos += 2**k * n
    zt_off = {}
    for k in range(n_t):
        zt_off[k] = pos
        pos += 2**k * n
    n_unk = pos

    n_eq = sum(2 ** (k + 1) * n for k in range(n_t)) + 2**n_t * n
    A = np.zeros((n_eq, n_unk))
    b = np.zeros(n_eq)
    Mdiag = ops.M
    row = 0
    for k in range(n_t):
        Et = ops.E[k].T.toarray()
        fw = sources.weak_vector(mesh, k, float(ops.times[k])) \
            if sources is not None else None
        for i in range(2**k):
            for s, c in ((+1.0, 2 * i), (-1.0, 2 * i + 1)):
                r = slice(row, row + n)
                A[r, z_off[k + 1] + c * n: z_off[k + 1] + (c + 1) * n] += np.diag(Mdiag)
                A[r, z_off[k] + i * n: z_off[k] + (i + 1) * n] -= Et
                A[r, zt_off[k] + i * n: zt_off[k] + (i + 1) * n] -= s * sd * Et
                if fw is not None:
                    b[row:row + n] += dt * fw
                if child_source is not None:
                    b[row:row + n] -= dt * child_source[k + 1][c]
                row += n
    for i in range(2**n_t):
        r = slice(row, row + n)
        A[r, z_off[n_t] + i * n: z_off[n_t] + (i + 1) * n] = np.eye(n)
        b[row:row + n] = zT[i]
        row += n
    assert row == n_eq

    x = np.linalg.solve(A, b)
    z = AdaptedField(tree, n)
    Zt = AdaptedField(tree, n, last_level=n_t - 1)
    for k in range(n_t + 1):
        z[k] = x[z_off[k]: z_off[k] + 2**k * n].reshape(2**k, n)
    for k in range(n_t):
        Zt[k] = x[zt_off[k]: zt_off[k] + 2**k * n].reshape(2**k, n)
    return BackwardSolution(z=z, Zt=Zt, ops=ops, report={})
