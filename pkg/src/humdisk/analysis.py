"""Numerical audits: duality gap, Carleman functionals, observability
ratio, and backward energy (Gronwall) regressions.

All time integrals use the half-step midpoint rule on the solver grid and
the exact tree expectation; spatial integrals use the mesh quadrature,
with gradient terms evaluated by the element (bulk) and edge (surface)
discrete gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardSolution, BackwardSources
from .forward import ControlTriple, ForwardSolution, msq_norm
from .mesh import ControlRegion, PolarMesh
from .stochastics import BinomialTree, tree_expectation
from .weights import WeightSet


def duality_gap(fsol: ForwardSolution, bsol: BackwardSolution,
                controls: ControlTriple | None) -> float:
    """Relative residual of the forward/backward duality identity."""
    ops = fsol.ops
    if bsol.ops.tree.n_t != ops.tree.n_t or bsol.ops.mesh is not ops.mesh:
        raise ValueError("forward and backward solutions use different discretizations")
    mesh, tree = ops.mesh, ops.tree
    M = ops.M
    n_t = tree.n_t
    term = float(tree_expectation(np.sum(M * fsol.y[n_t] * bsol.z[n_t], axis=-1)))
    init = float(np.sum(M * fsol.y[0][0] * bsol.z[0][0]))
    rhs = 0.0
    if controls is not None:
        for k in range(n_t):
            rhs += tree.dt * float(tree_expectation(
                np.sum(mesh.w_bulk * controls.u[k] * bsol.z[k], axis=-1)
                + np.sum(mesh.w_bulk * controls.v1[k] * bsol.Zt[k], axis=-1)
                + np.sum(mesh.w_surf_full * controls.v2[k] * bsol.Zt[k], axis=-1)
            ))
    scale = max(abs(term), abs(init), abs(rhs), 1e-300)
    return abs(term - init - rhs) / scale


@dataclass
class CarlemanReport:
    mode: str
    lam: float
    mu: float
    threshold: float
    lhs_terms: dict[str, float]
    rhs_terms: dict[str, float]
    below_threshold: bool

    @property
    def lhs_total(self) -> float:
        return sum(self.lhs_terms.values())

    @property
    def rhs_total(self) -> float:
        return sum(self.rhs_terms.values())

    @property
    def ratio(self) -> float:
        r = self.rhs_total
        return self.lhs_total / r if r > 0 else 0.0


def _time_integral(bsol: BackwardSolution, weigher) -> float:
    """sum_k dt E[ weigher(k) ] over the half-step grid."""
    tree = bsol.ops.tree
    return sum(tree.dt * float(tree_expectation(weigher(k)))
               for k in range(tree.n_t))


def carleman_sides(bsol: BackwardSolution, ws: WeightSet, region: ControlRegion,
                   mode: str, threshold: float,
                   sources: BackwardSources | None = None) -> CarlemanReport:
    """Evaluate both sides of the Carleman inequality in one of three modes.

    mode "full": divergence sources allowed; LHS powers (l3 m4, l3 m3,
    l m2, l m2), RHS includes the localized term, F-terms, and Z-terms.
    mode "nodiv": no divergence sources; the surface-gradient LHS term and
    the surface F2/Zhat RHS terms carry one power of mu less.
    mode "adjoint": coefficient-drift systems; all mu powers dropped and
    the Z-terms carry lambda^3 phi^3 weights.
    """
    if mode not in ("full", "nodiv", "adjoint"):
        raise ValueError(f"unknown Carleman mode {mode!r}")
    mesh, tree = bsol.ops.mesh, bsol.ops.tree
    lam, mu = ws.lam, ws.mu
    b = mesh.boundary
    w_b, w_s, w_el, w_e = mesh.w_bulk, mesh.w_surf, mesh.w_el, mesh.w_edge
    grad, sgrad = mesh.grad, mesh.surf_grad
    ind = region.indicator

    def bulk_sq(k, p_phi, f):
        return np.sum(w_b * ws.pow_product(k, 2, p_phi) * f(k) ** 2, axis=-1)

    def surf_sq(k, p_phi, f):
        return np.sum(w_s * ws.pow_product(k, 2, p_phi)[b] * f(k) ** 2, axis=-1)

    z = lambda k: bsol.z[k]
    z_b = lambda k: bsol.z[k][:, b]

    def grad_sq(k):
        g = (grad @ bsol.z[k].T).T.reshape(bsol.z[k].shape[0], mesh.n_el, 2)
        wphi = w_el * ws.pow_product_elems(k, 2, 1)
        return np.sum(wphi * np.sum(g * g, axis=-1), axis=-1)

    def sgrad_sq(k):
        g = (sgrad @ bsol.z[k].T).T
        wphi = w_e * ws.pow_product_edges(k, 2, 1)
        return np.sum(wphi * g * g, axis=-1)

    lhs: dict[str, float] = {}
    rhs: dict[str, float] = {}
    if mode == "adjoint":
        cz, czs, cg, cgs = lam**3, lam**3, lam, lam
    elif mode == "nodiv":
        cz, czs = lam**3 * mu**4, lam**3 * mu**3
        cg, cgs = lam * mu**2, lam * mu
    else:
        cz, czs = lam**3 * mu**4, lam**3 * mu**3
        cg, cgs = lam * mu**2, lam * mu**2
    lhs["bulk_state"] = cz * _time_integral(bsol, lambda k: bulk_sq(k, 3, z))
    lhs["surf_state"] = czs * _time_integral(bsol, lambda k: surf_sq(k, 3, z_b))
    lhs["bulk_grad"] = cg * _time_integral(bsol, grad_sq)
    lhs["surf_grad"] = cgs * _time_integral(bsol, sgrad_sq)

    rhs["localized"] = cz * _time_integral(
        bsol, lambda k: np.sum(ind * w_b * ws.pow_product(k, 2, 3) * bsol.z[k] ** 2,
                               axis=-1))
    Zt = lambda k: bsol.Zt[k]
    Zs = lambda k: bsol.Zt[k][:, b]
    if mode == "adjoint":
        rhs["bulk_mart"] = lam**3 * _time_integral(bsol, lambda k: bulk_sq(k, 3, Zt))
        rhs["surf_mart"] = lam**3 * _time_integral(bsol, lambda k: surf_sq(k, 3, Zs))
    else:
        rhs["bulk_mart"] = lam**2 * mu**2 * _time_integral(
            bsol, lambda k: bulk_sq(k, 2, Zt))
        cms = lam**2 * mu**2 if mode == "full" else lam**2 * mu
        rhs["surf_mart"] = cms * _time_integral(bsol, lambda k: surf_sq(k, 2, Zs))

        def src(name, getter, weigher):
            if sources is None or getter(sources) is None:
                rhs[name] = 0.0
                return
            rhs[name] = _time_integral(bsol, weigher)

        src("bulk_drift", lambda s: s.F1, lambda k: np.sum(
            w_b * ws.pow_product(k, 2, 0)
            * np.asarray(sources.F1(k, float(ws.times[k]))) ** 2))
        cf2 = mu if mode == "full" else 1.0
        src("surf_drift", lambda s: s.F2, lambda k: cf2 * np.sum(
            w_s * ws.pow_product(k, 2, 0)[b]
            * np.asarray(sources.F2(k, float(ws.times[k]))) ** 2))
        if mode == "full":
            src("bulk_div", lambda s: s.Fvec, lambda k: lam**2 * mu**2 * np.sum(
                w_el * ws.pow_product_elems(k, 2, 2)
                * np.sum(np.asarray(sources.Fvec(k, float(ws.times[k]))) ** 2,
                         axis=-1)))
            src("surf_div", lambda s: s.Fsurf, lambda k: lam**2 * mu**2 * np.sum(
                w_e * ws.pow_product_edges(k, 2, 2)
                * np.asarray(sources.Fsurf(k, float(ws.times[k]))) ** 2))

    for name, v in {**lhs, **rhs}.items():
        if v < 0 or not np.isfinite(v):
            raise ValueError(f"Carleman term {name} is negative or non-finite: {v}")
    return CarlemanReport(mode=mode, lam=lam, mu=mu, threshold=threshold,
                          lhs_terms=lhs, rhs_terms=rhs,
                          below_threshold=lam < threshold)


@dataclass
class ObservabilityReport:
    initial_norm: float
    observation: float
    ratio: float
    K: float
    effective_C: float       # log(ratio) / K when both are positive
    degenerate: bool
    failure: bool            # zero observation with nonzero initial norm


def observability_ratio(bsol: BackwardSolution, region: ControlRegion,
                        K: float) -> ObservabilityReport:
    """||z(0)||_M^2 over the localized-state + martingale observation."""
    ops = bsol.ops
    mesh, tree = ops.mesh, ops.tree
    init = float(np.sum(ops.M * bsol.z[0][0] ** 2))
    obs = 0.0
    for k in range(tree.n_t):
        obs += tree.dt * float(tree_expectation(
            np.sum(region.indicator * mesh.w_bulk * bsol.z[k] ** 2, axis=-1)
            + np.sum(mesh.w_bulk * bsol.Zt[k] ** 2, axis=-1)
            + np.sum(mesh.w_surf * bsol.Zt[k][:, mesh.boundary] ** 2, axis=-1)
        ))
    degenerate = init == 0.0
    failure = (not degenerate) and obs == 0.0
    ratio = init / obs if obs > 0 else float("inf") if failure else 0.0
    eff_c = float(np.log(ratio) / K) if (np.isfinite(ratio) and ratio > 0 and K > 0) \
        else float("nan")
    return ObservabilityReport(initial_norm=init, observation=obs, ratio=ratio,
                               K=K, effective_C=eff_c,
                               degenerate=degenerate, failure=failure)


def gronwall_energy_check(bsol: BackwardSolution,
                          norms: dict[str, float]) -> dict[str, float]:
    """Fit the smallest c* with ||z_0||^2 <= e^{c* T K2} E||z_k||^2 per level."""
    ops = bsol.ops
    M, tree = ops.M, ops.tree
    init = float(np.sum(M * bsol.z[0][0] ** 2))
    if init == 0.0:
        return {"c_star": 0.0, "degenerate": 1.0, "K2": 0.0}
    k2 = norms["a1"] + norms["a2"] + norms["B1"] ** 2 + norms["B2"] ** 2
    c_star = 0.0
    for k in range(tree.n_t + 1):
        e_k = float(tree_expectation(np.sum(M * bsol.z[k] ** 2, axis=-1)))
        if e_k <= 0:
            raise ValueError("backward energy vanished at an interior level")
        ratio = init / e_k
        if ratio > 1.0 and k2 > 0:
            c_star = max(c_star, float(np.log(ratio) / (tree.T * k2)))
        elif ratio > 1.0 and k2 == 0.0:
            raise ValueError("backward norm decreased with zero lower-order terms")
    if not np.isfinite(c_star):
        raise ValueError("Gronwall constant is not finite")
    return {"c_star": c_star, "degenerate": 0.0, "K2": k2}


def smoothed_random_terminal(mesh: PolarMesh, tree: BinomialTree,
                             rng: np.random.Generator,
                             sweeps: int = 3, scale: float = 1.0) -> np.ndarray:
    """Leaf-indexed Gaussian terminal data with mass-lumped smoothing.

    Raw node noise is averaged a few times through the element structure so
    that mesh-frequency oscillations do not dominate gradient terms.
    """
    raw = rng.standard_normal((2**tree.n_t, mesh.n_dof)) * scale
    # Mass-lumped averaging: scatter element means back to nodes.
    import scipy.sparse as sp
    n_el = mesh.n_el
    avg = sp.csr_matrix(
        (np.full(4 * n_el, 0.25),
         (np.repeat(np.arange(n_el), 4), mesh.elems.ravel())),
        shape=(n_el, mesh.n_dof))
    P = avg.T @ sp.diags(mesh.w_el) @ avg
    d = np.asarray(P.sum(axis=1)).ravel()
    out = raw
    for _ in range(sweeps):
        out = (P @ out.T).T / d
    return out


CARLEMAN_HEADER = ["instance_id", "lambda_multiple", "lhs_total", "rhs_total", "ratio"]
OBSERVABILITY_HEADER = ["T", "K", "ratio"]


def write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in header})
