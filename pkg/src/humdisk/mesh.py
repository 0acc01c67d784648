"""Polar disk mesh with a coupled bulk/surface dof space and weak-form operators.

The domain is the disk of radius R.  Nodes live on concentric rings: one
center node, n_r - 1 interior rings of n_theta nodes, and one boundary ring
of n_theta nodes.  Each boundary node is a single degree of freedom carrying
both the bulk trace and the surface unknown, so the trace identification
y_Gamma = y|_Gamma is structural.

Spatial operators are assembled variationally from a discrete gradient with
one-point element quadrature; this keeps the stiffness operator symmetric
positive semidefinite with constants in its kernel, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid geometry request (bad radius, parity, or resolution)."""


class EllipticityError(ValueError):
    """A coefficient sample violates the uniform ellipticity bound."""


@dataclass(frozen=True)
class PolarMesh:
    R: float
    n_r: int
    n_theta: int
    node_xy: np.ndarray        # (n_dof, 2) cartesian positions
    node_r: np.ndarray         # (n_dof,) radial coordinate
    w_bulk: np.ndarray         # (n_dof,) bulk quadrature weight (~ dx)
    w_surf_full: np.ndarray    # (n_dof,) surface weight, zero off the boundary
    boundary: np.ndarray       # (n_theta,) dof indices of the boundary ring
    interior: np.ndarray       # dof indices of all non-boundary nodes
    elems: np.ndarray          # (n_el, 4) dof indices per logical quad element
    elem_xy: np.ndarray        # (n_el, 2) element quadrature point
    w_el: np.ndarray           # (n_el,) element quadrature weight
    grad: sp.csr_matrix        # (2*n_el, n_dof) discrete gradient
    surf_grad: sp.csr_matrix   # (n_theta, n_dof) tangential gradient on edges
    edge_xy: np.ndarray        # (n_theta, 2) boundary edge midpoints
    w_edge: np.ndarray         # (n_theta,) boundary edge weights (= R dtheta)

    @property
    def n_dof(self) -> int:
        return self.node_xy.shape[0]

    @property
    def n_el(self) -> int:
        return self.elems.shape[0]

    @property
    def w_surf(self) -> np.ndarray:
        """Surface weights restricted to boundary dofs, in boundary order."""
        return self.w_surf_full[self.boundary]

    @property
    def mass(self) -> np.ndarray:
        """Diagonal of the coupled L2(G) x L2(Gamma) mass operator."""
        return self.w_bulk + self.w_surf_full


def build_polar_mesh(R: float, n_r: int, n_theta: int) -> PolarMesh:
    """Build the disk mesh.  n_theta must be even; sizes must be desk-scale sane."""
    if R <= 0:
        raise MeshError(f"disk radius must be positive, got R={R}")
    if n_r < 4:
        raise MeshError(f"n_r must be >= 4, got {n_r}")
    if n_theta < 8 or n_theta % 2 != 0:
        raise MeshError(f"n_theta must be even and >= 8, got {n_theta}")

    dr = R / n_r
    dth = 2.0 * np.pi / n_theta
    theta = np.arange(n_theta) * dth

    n_dof = 1 + n_r * n_theta
    node_r = np.empty(n_dof)
    node_th = np.empty(n_dof)
    node_r[0] = 0.0
    node_th[0] = 0.0
    for i in range(1, n_r + 1):
        sl = slice(1 + (i - 1) * n_theta, 1 + i * n_theta)
        node_r[sl] = i * dr
        node_th[sl] = theta
    node_xy = np.column_stack([node_r * np.cos(node_th), node_r * np.sin(node_th)])

    boundary = np.arange(1 + (n_r - 1) * n_theta, n_dof)
    interior = np.arange(0, 1 + (n_r - 1) * n_theta)

    # Nodal bulk weights: exact annular cell areas (they sum to pi R^2 exactly).
    w_bulk = np.empty(n_dof)
    w_bulk[0] = np.pi * (dr / 2.0) ** 2
    for i in range(1, n_r):
        sl = slice(1 + (i - 1) * n_theta, 1 + i * n_theta)
        w_bulk[sl] = (i * dr) * dr * dth
    w_bulk[boundary] = (R * dr / 2.0 - dr**2 / 8.0) * dth

    w_surf_full = np.zeros(n_dof)
    w_surf_full[boundary] = R * dth

    # Logical quad elements between consecutive rings (ring 0 is the center,
    # whose two nodes coincide; the collapsed edge averages over ring 1).
    def dof(i: int, j: int) -> int:
        if i == 0:
            return 0
        return 1 + (i - 1) * n_theta + (j % n_theta)

    n_el = n_r * n_theta
    elems = np.empty((n_el, 4), dtype=np.int64)
    w_el = np.empty(n_el)
    elem_r = np.empty(n_el)
    elem_th = np.empty(n_el)
    rows_i: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    e = 0
    for i in range(n_r):
        rc = (i + 0.5) * dr
        for j in range(n_theta):
            n00, n10 = dof(i, j), dof(i + 1, j)
            n01, n11 = dof(i, j + 1), dof(i + 1, j + 1)
            elems[e] = (n00, n10, n01, n11)
            w_el[e] = rc * dr * dth
            elem_r[e] = rc
            elem_th[e] = (j + 0.5) * dth
            # radial derivative row (physical frame e_r)
            cr = 1.0 / (2.0 * dr)
            for n, v in ((n10, cr), (n11, cr), (n00, -cr), (n01, -cr)):
                rows_i.append(2 * e)
                cols.append(n)
                vals.append(v)
            # angular derivative row (physical frame e_theta)
            ct = 1.0 / (2.0 * rc * dth)
            for n, v in ((n01, ct), (n11, ct), (n00, -ct), (n10, -ct)):
                rows_i.append(2 * e + 1)
                cols.append(n)
                vals.append(v)
            e += 1
    grad_polar = sp.csr_matrix(
        (vals, (rows_i, cols)), shape=(2 * n_el, n_dof)
    )
    # Rotate (d_r, d_theta/r) rows to cartesian so matrix coefficients A(x)
    # apply in the frame they are specified in.
    ce, se = np.cos(elem_th), np.sin(elem_th)
    rot = sp.block_diag(
        [sp.csr_matrix(np.array([[c, -s], [s, c]])) for c, s in zip(ce, se)],
        format="csr",
    )
    grad = (rot @ grad_polar).tocsr()
    elem_xy = np.column_stack([elem_r * ce, elem_r * se])

    # Boundary edges for the Laplace-Beltrami form (periodic 1D ring).
    rows_s: list[int] = []
    cols_s: list[int] = []
    vals_s: list[float] = []
    ds = R * dth
    for j in range(n_theta):
        a = boundary[j]
        b = boundary[(j + 1) % n_theta]
        rows_s += [j, j]
        cols_s += [b, a]
        vals_s += [1.0 / ds, -1.0 / ds]
    surf_grad = sp.csr_matrix((vals_s, (rows_s, cols_s)), shape=(n_theta, n_dof))
    mid_th = theta + dth / 2.0
    edge_xy = np.column_stack([R * np.cos(mid_th), R * np.sin(mid_th)])
    w_edge = np.full(n_theta, ds)

    return PolarMesh(
        R=R, n_r=n_r, n_theta=n_theta,
        node_xy=node_xy, node_r=node_r,
        w_bulk=w_bulk, w_surf_full=w_surf_full,
        boundary=boundary, interior=interior,
        elems=elems, elem_xy=elem_xy, w_el=w_el,
        grad=grad, surf_grad=surf_grad, edge_xy=edge_xy, w_edge=w_edge,
    )


def integrate_bulk(mesh: PolarMesh, field: np.ndarray) -> float:
    """Quadrature for the bulk integral of a nodal field."""
    field = np.asarray(field)
    if field.shape[-1] != mesh.n_dof:
        raise ValueError(f"field has {field.shape[-1]} entries, mesh has {mesh.n_dof} dofs")
    return float(np.sum(mesh.w_bulk * field, axis=-1))


def integrate_surface(mesh: PolarMesh, field: np.ndarray) -> float:
    """Quadrature for the surface integral; accepts full-dof or boundary-sized fields."""
    field = np.asarray(field)
    if field.shape[-1] == mesh.n_dof:
        field = field[..., mesh.boundary]
    elif field.shape[-1] != mesh.n_theta:
        raise ValueError("field must be dof-sized or boundary-sized")
    return float(np.sum(mesh.w_surf * field, axis=-1))


def _as_field(spec, points: np.ndarray, t: float, vec: int = 0) -> np.ndarray:
    """Evaluate a constant / array / callable coefficient at given points."""
    n = points.shape[0]
    if callable(spec):
        out = np.asarray(spec(t, points), dtype=float)
    else:
        out = np.asarray(spec, dtype=float)
    if vec == 0:
        return np.broadcast_to(out, (n,)).copy() if out.ndim == 0 else out
    if vec == 1:
        if out.ndim == 1:
            return np.broadcast_to(out, (n, 2)).copy()
        return out
    # 2x2 matrix field
    if out.ndim == 2:
        return np.broadcast_to(out, (n, 2, 2)).copy()
    return out


@dataclass
class CoefficientSet:
    """Problem coefficients; each entry is a constant or a callable f(t, points).

    Deterministic in (t, x); sampled piecewise-constant on the solver's
    half-step time grid.
    """

    A: object = field(default_factory=lambda: np.eye(2))   # bulk diffusion, 2x2 SPD
    b_surf: object = 1.0     # tangential surface diffusion (scalar on the circle)
    a1: object = 0.0         # bulk reaction
    a2: object = 0.0         # surface reaction
    B1: object = field(default_factory=lambda: np.zeros(2))  # bulk convection
    B2: object = 0.0         # surface tangential convection
    beta0: float = 1.0

    def A_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.A, points, t, vec=2)

    def b_surf_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.b_surf, points, t)

    def a1_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.a1, points, t)

    def a2_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.a2, points, t)

    def B1_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.B1, points, t, vec=1)

    def B2_at(self, t: float, points: np.ndarray) -> np.ndarray:
        return _as_field(self.B2, points, t)

    def sup_norms(self, mesh: PolarMesh, times: np.ndarray) -> dict[str, float]:
        """Sup norms of a1, a2, B1, B2 over the discrete sample grid."""
        na1 = na2 = nb1 = nb2 = 0.0
        for t in np.atleast_1d(times):
            na1 = max(na1, float(np.max(np.abs(self.a1_at(t, mesh.node_xy)))))
            na2 = max(na2, float(np.max(np.abs(self.a2_at(t, mesh.node_xy[mesh.boundary])))))
            nb1 = max(nb1, float(np.max(np.linalg.norm(self.B1_at(t, mesh.elem_xy), axis=-1))))
            nb2 = max(nb2, float(np.max(np.abs(self.B2_at(t, mesh.edge_xy)))))
        return {"a1": na1, "a2": na2, "B1": nb1, "B2": nb2}


@dataclass(frozen=True)
class ControlRegion:
    """Interior control patch G0 (a disk) with the psi-critical set G1 inside it."""

    center: np.ndarray
    radius: float
    g1_radius: float
    indicator: np.ndarray    # 0/1 over all dofs, 0 on the boundary ring

    @staticmethod
    def disk(mesh: PolarMesh, center, radius: float, g1_radius: float) -> "ControlRegion":
        center = np.asarray(center, dtype=float)
        if radius <= 0 or radius + np.linalg.norm(center) >= mesh.R:
            raise MeshError("control region must lie strictly inside the disk")
        # G1 is centered at the origin (the gradient zero of psi) and must
        # sit strictly inside G0.
        if not (0 < g1_radius and np.linalg.norm(center) + g1_radius < radius):
            raise MeshError("g1 region (around the origin) must fit strictly inside G0")
        d = np.linalg.norm(mesh.node_xy - center, axis=1)
        ind = (d <= radius).astype(float)
        ind[mesh.boundary] = 0.0
        return ControlRegion(center=center, radius=radius, g1_radius=g1_radius, indicator=ind)

    @property
    def contains_g1(self) -> bool:
        return np.linalg.norm(self.center) + self.g1_radius < self.radius


@dataclass(frozen=True)
class SpatialForms:
    """Assembled weak-form operators at one time sample."""

    t: float
    M: np.ndarray              # diagonal mass (bulk + surface weights)
    S: sp.csr_matrix           # symmetric PSD stiffness (bulk + surface)
    C: sp.csr_matrix           # convection (bulk B1 . grad + surface B2 d_s)
    Rx: np.ndarray             # diagonal reaction (a1 bulk rows, a2 boundary rows)
    grad: sp.csr_matrix
    w_el: np.ndarray


def assemble_forms(mesh: PolarMesh, coeffs: CoefficientSet, t: float) -> SpatialForms:
    """Assemble mass, stiffness, convection and reaction at time t."""
    A = coeffs.A_at(t, mesh.elem_xy)                     # (n_el, 2, 2)
    sym_err = np.max(np.abs(A - np.swapaxes(A, -1, -2)))
    if sym_err > 1e-12 * max(1.0, float(np.max(np.abs(A)))):
        raise EllipticityError("bulk diffusion matrix is not symmetric")
    tr = A[:, 0, 0] + A[:, 1, 1]
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    disc = np.sqrt(np.maximum((tr / 2) ** 2 - det, 0.0))
    lam_min = tr / 2 - disc
    if np.any(lam_min < coeffs.beta0 * (1 - 1e-12)):
        raise EllipticityError(
            f"bulk diffusion eigenvalue {lam_min.min():.3g} below beta0={coeffs.beta0}"
        )
    b = coeffs.b_surf_at(t, mesh.edge_xy)
    if np.any(b < coeffs.beta0 * (1 - 1e-12)):
        raise EllipticityError(
            f"surface diffusion {b.min():.3g} below beta0={coeffs.beta0}"
        )

    # Stiffness: Grad^T (w_el A) Grad + Gs^T (w_edge b) Gs.
    n_el = mesh.n_el
    blocks = mesh.w_el[:, None, None] * A
    WA = sp.bsr_matrix(
        (blocks, np.arange(n_el), np.arange(n_el + 1)), shape=(2 * n_el, 2 * n_el)
    ).tocsr()
    S = (mesh.grad.T @ WA @ mesh.grad) + (
        mesh.surf_grad.T @ sp.diags(mesh.w_edge * b) @ mesh.surf_grad
    )
    S = ((S + S.T) * 0.5).tocsr()

    # Convection (weak): sum_el w_el (B1 . grad y) avg(test) + surface analog.
    B1 = coeffs.B1_at(t, mesh.elem_xy)                   # (n_el, 2)
    avg = sp.csr_matrix(
        (
            np.full(4 * n_el, 0.25),
            (np.repeat(np.arange(n_el), 4), mesh.elems.ravel()),
        ),
        shape=(n_el, mesh.n_dof),
    )
    rows = np.repeat(np.arange(n_el), 2)
    cols = np.arange(2 * n_el)
    WB = sp.csr_matrix(
        ((mesh.w_el[:, None] * B1).ravel(), (rows, cols)), shape=(n_el, 2 * n_el)
    )
    C = avg.T @ (WB @ mesh.grad)
    B2 = coeffs.B2_at(t, mesh.edge_xy)
    avg_s = sp.csr_matrix(
        (
            np.full(2 * mesh.n_theta, 0.5),
            (
                np.repeat(np.arange(mesh.n_theta), 2),
                np.column_stack(
                    [mesh.boundary, np.roll(mesh.boundary, -1)]
                ).ravel(),
            ),
        ),
        shape=(mesh.n_theta, mesh.n_dof),
    )
    C = (C + avg_s.T @ sp.diags(mesh.w_edge * B2) @ mesh.surf_grad).tocsr()

    # Reaction diagonal: a1 against the bulk weights, a2 against surface weights.
    Rx = mesh.w_bulk * coeffs.a1_at(t, mesh.node_xy)
    Rx[mesh.boundary] += mesh.w_surf * coeffs.a2_at(t, mesh.node_xy[mesh.boundary])

    return SpatialForms(t=t, M=mesh.mass.copy(), S=S, C=C, Rx=Rx,
                        grad=mesh.grad, w_el=mesh.w_el)
