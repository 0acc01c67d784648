"""Carleman weight family on the disk and the associated parameter rules.

The auxiliary function is psi(x) = R^2 - |x|^2 (positive inside, zero on the
circle, gradient nonvanishing away from the center), and the weights are

    alpha(t,x) = (e^{mu psi} - e^{2 mu |psi|_inf}) / (t (T - t)),
    phi(t,x)   = e^{mu psi} / (t (T - t)),
    ell = lambda alpha,   theta = e^{ell},

sampled on the half-step time grid t_k = (k + 1/2) dt so the degenerate
endpoints t in {0, T} are never evaluated.  All exponentials are taken
through an overflow guard that clips exponents to +-EXP_CAP and records
that clipping happened.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import PolarMesh

EXP_CAP = 700.0


def exp_clip(x: np.ndarray, flag: list | None = None) -> np.ndarray:
    """exp with the exponent clipped to +-EXP_CAP; optionally records clipping."""
    x = np.asarray(x, dtype=float)
    clipped = np.clip(x, -EXP_CAP, EXP_CAP)
    if flag is not None and np.any(clipped != x):
        flag.append(True)
    return np.exp(clipped)


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class PsiField:
    values: np.ndarray       # psi at every node
    grad: np.ndarray         # (n_dof, 2) gradient of psi
    sup_norm: float          # |psi|_inf
    normal_slope: np.ndarray  # d_nu psi on the boundary ring
    boundary_slope_bound: float  # the constant c with d_nu psi <= -c < 0


def build_psi(mesh: PolarMesh, g1_radius: float) -> PsiField:
    """psi = R^2 - |x|^2; g1 must contain the gradient's only zero (the center)."""
    if not (0 < g1_radius < mesh.R):
        raise WeightError("g1_radius must contain the center and lie inside the disk")
    r = mesh.node_r
    values = mesh.R**2 - r**2
    grad = -2.0 * mesh.node_xy
    normal_slope = np.full(mesh.n_theta, -2.0 * mesh.R)
    psi = PsiField(
        values=values,
        grad=grad,
        sup_norm=float(mesh.R**2),
        normal_slope=normal_slope,
        boundary_slope_bound=2.0 * mesh.R,
    )
    # Build-time invariant checks.
    interior_mask = np.ones(mesh.n_dof, bool)
    interior_mask[mesh.boundary] = False
    if not np.all(values[interior_mask] > 0):
        raise WeightError("psi must be positive at interior nodes")
    if not np.allclose(values[mesh.boundary], 0.0):
        raise WeightError("psi must vanish on the boundary ring")
    outside_g1 = r >= g1_radius
    if not np.all(np.linalg.norm(grad[outside_g1], axis=1) > 0):
        raise WeightError("psi gradient vanishes outside the g1 region")
    return psi


@dataclass
class WeightSet:
    lam: float
    mu: float
    T: float
    times: np.ndarray        # (n_t,) half-step samples, strictly inside (0, T)
    psi: PsiField
    alpha: np.ndarray        # (n_t, n_dof)
    phi: np.ndarray          # (n_t, n_dof)
    ell: np.ndarray          # (n_t, n_dof) = lam * alpha
    theta: np.ndarray        # (n_t, n_dof) = exp(ell), clipped
    alpha_eps: np.ndarray    # (n_t, n_dof) regularized alpha
    theta_eps: np.ndarray    # (n_t, n_dof) = exp(lam * alpha_eps), clipped
    eps_reg: float
    log_phi: np.ndarray
    clipped: bool = False
    # node -> element / edge averages for gradient-term quadrature
    _elems: np.ndarray = field(default=None, repr=False)
    _boundary: np.ndarray = field(default=None, repr=False)

    def pow_product(self, k: int, theta_exp: float, phi_exp: float,
                    regularized: bool = False) -> np.ndarray:
        """theta^theta_exp * phi^phi_exp at time sample k, overflow-guarded."""
        ell = self.lam * self.alpha_eps[k] if regularized else self.ell[k]
        flag: list = []
        out = exp_clip(theta_exp * ell + phi_exp * self.log_phi[k], flag)
        if flag:
            self.clipped = True
        return out

    def pow_product_elems(self, k: int, theta_exp: float, phi_exp: float) -> np.ndarray:
        """Same product averaged onto elements (for gradient-term quadrature)."""
        nodal = self.pow_product(k, theta_exp, phi_exp)
        return nodal[self._elems].mean(axis=1)

    def pow_product_edges(self, k: int, theta_exp: float, phi_exp: float) -> np.ndarray:
        nodal = self.pow_product(k, theta_exp, phi_exp)
        b = nodal[self._boundary]
        return 0.5 * (b + np.roll(b, -1))


def evaluate_weights(psi: PsiField, mesh: PolarMesh, lam: float, mu: float,
                     T: float, times: np.ndarray, eps_reg: float = 2.0) -> WeightSet:
    """Sample the weight family on times x nodes.  Times must avoid {0, T}."""
    if lam < 1 or mu < 1:
        raise WeightError("Carleman parameters lambda, mu must be >= 1")
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(times >= T):
        raise WeightError("weight samples at t=0 or t=T are singular")
    if eps_reg <= 0:
        raise WeightError("eps_reg must be positive")

    e_mu_psi = np.exp(mu * psi.values)                     # (n_dof,)
    top = e_mu_psi - np.exp(2.0 * mu * psi.sup_norm)       # < 0 everywhere
    denom = times * (T - times)                            # (n_t,)
    denom_eps = (times + eps_reg) * (T - times + eps_reg)

    alpha = top[None, :] / denom[:, None]
    alpha_eps = top[None, :] / denom_eps[:, None]
    phi = e_mu_psi[None, :] / denom[:, None]
    log_phi = mu * psi.values[None, :] - np.log(denom)[:, None]
    ell = lam * alpha
    flag: list = []
    theta = exp_clip(ell, flag)
    theta_eps = exp_clip(lam * alpha_eps, flag)

    ws = WeightSet(
        lam=lam, mu=mu, T=T, times=times, psi=psi,
        alpha=alpha, phi=phi, ell=ell, theta=theta,
        alpha_eps=alpha_eps, theta_eps=theta_eps, eps_reg=eps_reg,
        log_phi=log_phi, clipped=bool(flag),
        _elems=mesh.elems, _boundary=mesh.boundary,
    )
    # Boundary spatial constancy is exact by construction (psi = 0 there);
    # assert it anyway since downstream audits rely on it.
    b = mesh.boundary
    for arr in (alpha, phi):
        spread = arr[:, b].max(axis=1) - arr[:, b].min(axis=1)
        if np.any(spread != 0.0):
            raise WeightError("alpha/phi are not spatially constant on the boundary")
    if np.any(theta_eps < theta):
        raise WeightError("theta_eps must dominate theta pointwise")
    return ws


def verify_weight_bounds(ws: WeightSet) -> dict[str, float]:
    """Fit the minimal constants realizing the five time-derivative bounds.

    Time derivatives are centered differences on the half-step grid; the
    first/last samples are excluded from the derivative fits.
    """
    t = ws.times
    if len(t) < 3:
        raise WeightError("need at least three time samples to fit bounds")
    dt = t[1] - t[0]
    mid = slice(1, -1)
    phi_t = (ws.phi[2:] - ws.phi[:-2]) / (2 * dt)
    phi_tt = (ws.phi[2:] - 2 * ws.phi[1:-1] + ws.phi[:-2]) / dt**2
    alpha_t = (ws.alpha[2:] - ws.alpha[:-2]) / (2 * dt)
    alpha_tt = (ws.alpha[2:] - 2 * ws.alpha[1:-1] + ws.alpha[:-2]) / dt**2
    T = ws.T
    e2mu = np.exp(2 * ws.mu * ws.psi.sup_norm)
    phi_m = ws.phi[mid]
    report = {
        "phi_lower": float(np.min(ws.phi) * T**2),
        "phi_t": float(np.max(np.abs(phi_t) / (T * phi_m**2))),
        "phi_tt": float(np.max(np.abs(phi_tt) / (T**2 * phi_m**3))),
        "alpha_t": float(np.max(np.abs(alpha_t) / (T * e2mu * phi_m**2))),
        "alpha_tt": float(np.max(np.abs(alpha_tt) / (T**2 * e2mu * phi_m**3))),
    }
    for name, c in report.items():
        if not np.isfinite(c):
            raise WeightError(f"fitted constant for {name} is not finite")
    return report


def min_lambda_carleman(T: float, mu: float, psi: PsiField, lambda0: float = 1.0) -> float:
    """Smallest admissible lambda for the main Carleman estimate."""
    if T <= 0:
        raise WeightError("T must be positive")
    if mu < 1 or lambda0 < 1:
        raise WeightError("mu and lambda0 must be >= 1")
    return lambda0 * (np.exp(2.0 * mu * psi.sup_norm) * T + T**2)


def min_lambda_adjoint(T: float, norms: dict[str, float], lambda0: float = 1.0) -> float:
    """Smallest admissible lambda for the adjoint-system Carleman estimate."""
    if T <= 0:
        raise WeightError("T must be positive")
    k = 1.0 + norms["a1"] ** (2.0 / 3.0) + norms["a2"] ** (2.0 / 3.0) \
        + norms["B1"] ** 2 + norms["B2"] ** 2
    return lambda0 * (T + T**2 * k)


@dataclass(frozen=True)
class CostFactor:
    K: float
    components: dict[str, float]


def cost_factor_K(T: float, norms: dict[str, float]) -> CostFactor:
    """Null-controllability cost exponent K from the coefficient sup norms."""
    if T <= 0:
        raise WeightError("T must be positive")
    comps = {
        "one": 1.0,
        "inv_T": 1.0 / T,
        "a1_23": norms["a1"] ** (2.0 / 3.0),
        "a2_23": norms["a2"] ** (2.0 / 3.0),
        "T_a": T * (norms["a1"] + norms["a2"]),
        "T_B": (1.0 + T) * (norms["B1"] ** 2 + norms["B2"] ** 2),
    }
    return CostFactor(K=float(sum(comps.values())), components=comps)


def half_step_times(T: float, n_t: int) -> np.ndarray:
    dt = T / n_t
    return (np.arange(n_t) + 0.5) * dt
