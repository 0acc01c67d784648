"""Experiment configuration: flat dotted key=value text, fully validated.

The format is line-oriented: one ``section.key = value`` per line, ``#``
comments and blank lines ignored.  Every key is known and validated
before any computation starts; unknown keys are rejected.  The canonical
echo produced by :func:`effective_text` re-parses to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .mesh import CoefficientSet, ControlRegion, PolarMesh, build_polar_mesh
from .stochastics import MAX_N_T, BinomialTree, build_tree
from .weights import (PsiField, WeightSet, build_psi, evaluate_weights,
                      half_step_times, min_lambda_adjoint)


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or invalid."""


@dataclass
class ExperimentConfig:
    # mesh
    R: float = 1.0
    n_r: int = 12
    n_theta: int = 24
    # time
    T: float = 1.0
    n_t: int = 8
    # region
    g0_center: tuple[float, float] = (0.0, 0.0)
    g0_radius: float = 0.6
    g1_radius: float = 0.3
    # coeffs
    A_spec: str = "iso:1.0"
    b_surf: float = 1.0
    a1: float = 0.0
    a2: float = 0.0
    B1: tuple[float, float] = (0.0, 0.0)
    B2: float = 0.0
    beta0: float = 1.0
    # weights
    mu: float = 1.0
    lambda_factor: float = 2.0
    lambda0: float = 1.0
    eps_reg: float = 2.0
    # penalty
    eps: float = 1e-6
    cg_tol: float = 1e-13
    cg_max_iter: int = 4000
    # run
    seed: int = 0
    output_dir: str = "out"

    def validate(self) -> None:
        if self.R <= 0:
            raise ConfigError("mesh.R must be positive")
        if self.n_r < 4:
            raise ConfigError("mesh.n_r must be at least 4")
        if self.n_theta < 8 or self.n_theta % 2 != 0:
            raise ConfigError("mesh.n_theta must be an even integer >= 8")
        if self.T <= 0:
            raise ConfigError("time.T must be positive")
        if not 1 <= self.n_t <= MAX_N_T:
            raise ConfigError(f"time.n_t must be in [1, {MAX_N_T}]")
        cx, cy = self.g0_center
        if self.g0_radius <= 0 or self.g1_radius <= 0:
            raise ConfigError("region radii must be positive")
        if self.g1_radius >= self.g0_radius:
            raise ConfigError("region.g1_radius must be strictly inside g0_radius")
        if float(np.hypot(cx, cy)) + self.g0_radius >= self.R:
            raise ConfigError("region.g0 must be compactly contained in the disk")
        _parse_a_spec(self.A_spec)  # raises on malformed input
        if self.b_surf <= 0:
            raise ConfigError("coeffs.b_surf must be positive")
        if self.beta0 <= 0:
            raise ConfigError("coeffs.beta0 must be positive")
        if self.mu < 1:
            raise ConfigError("weights.mu must be >= 1")
        if self.lambda_factor <= 0:
            raise ConfigError("weights.lambda_factor must be positive")
        if self.lambda0 <= 0:
            raise ConfigError("weights.lambda0 must be positive")
        if self.eps_reg <= 0:
            raise ConfigError("weights.eps_reg must be positive")
        if self.eps <= 0:
            raise ConfigError("penalty.eps must be positive")
        if self.cg_tol <= 0:
            raise ConfigError("penalty.cg_tol must be positive")
        if self.cg_max_iter < 1:
            raise ConfigError("penalty.cg_max_iter must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")


# key in file -> (attribute, parser)
def _parse_pair(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {s!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_a_spec(s: str) -> np.ndarray:
    """A_spec forms: 'iso:s', 'diag:a,b', 'full:a11,a12,a21,a22' (SPD)."""
    try:
        kind, _, rest = s.partition(":")
        vals = [float(p) for p in rest.split(",")] if rest else []
        if kind == "iso" and len(vals) == 1:
            A = vals[0] * np.eye(2)
        elif kind == "diag" and len(vals) == 2:
            A = np.diag(vals)
        elif kind == "full" and len(vals) == 4:
            A = np.array(vals).reshape(2, 2)
        else:
            raise ValueError(f"unknown form {kind!r}")
    except ValueError as exc:
        raise ConfigError(f"coeffs.A_spec invalid: {exc}") from exc
    if not np.allclose(A, A.T) or np.min(np.linalg.eigvalsh(0.5 * (A + A.T))) <= 0:
        raise ConfigError("coeffs.A_spec must define a symmetric positive-definite matrix")
    return A


_KEYS: dict[str, tuple[str, object]] = {
    "mesh.R": ("R", float),
    "mesh.n_r": ("n_r", int),
    "mesh.n_theta": ("n_theta", int),
    "time.T": ("T", float),
    "time.n_t": ("n_t", int),
    "region.g0_center": ("g0_center", _parse_pair),
    "region.g0_radius": ("g0_radius", float),
    "region.g1_radius": ("g1_radius", float),
    "coeffs.A_spec": ("A_spec", str),
    "coeffs.b_surf": ("b_surf", float),
    "coeffs.a1": ("a1", float),
    "coeffs.a2": ("a2", float),
    "coeffs.B1": ("B1", _parse_pair),
    "coeffs.B2": ("B2", float),
    "coeffs.beta0": ("beta0", float),
    "weights.mu": ("mu", float),
    "weights.lambda_factor": ("lambda_factor", float),
    "weights.lambda0": ("lambda0", float),
    "weights.eps_reg": ("eps_reg", float),
    "penalty.eps": ("eps", float),
    "penalty.cg_tol": ("cg_tol", float),
    "penalty.cg_max_iter": ("cg_max_iter", int),
    "seed": ("seed", int),
    "output_dir": ("output_dir", str),
}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYS.items()}


def _set_key(cfg_kwargs: dict, key: str, raw: str) -> None:
    if key not in _KEYS:
        raise ConfigError(f"unknown configuration key {key!r}")
    attr, parser = _KEYS[key]
    try:
        cfg_kwargs[attr] = parser(raw.strip())
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        _set_key(kwargs, key.strip(), raw)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    kwargs: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        _set_key(kwargs, key.strip(), raw)
    out = replace(cfg, **kwargs)
    out.validate()
    return out


def _format_value(attr: str, value) -> str:
    if attr in ("g0_center", "B1"):
        return f"{value[0]!r}, {value[1]!r}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def effective_text(cfg: ExperimentConfig) -> str:
    """Canonical echo of the full effective configuration; round-trips."""
    lines = ["# effective configuration"]
    for f in fields(ExperimentConfig):
        key = _ATTR_TO_KEY[f.name]
        lines.append(f"{key} = {_format_value(f.name, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


@dataclass
class RunContext:
    """All objects a subcommand needs, instantiated once from a config."""

    cfg: ExperimentConfig
    mesh: PolarMesh
    coeffs: CoefficientSet
    region: ControlRegion
    tree: BinomialTree
    psi: PsiField
    norms: dict[str, float] = field(default_factory=dict)
    lam: float = 0.0
    lambda_threshold: float = 0.0

    def weight_set(self) -> WeightSet:
        return evaluate_weights(self.psi, self.mesh, lam=self.lam,
                                mu=self.cfg.mu, T=self.cfg.T,
                                times=half_step_times(self.cfg.T, self.cfg.n_t),
                                eps_reg=self.cfg.eps_reg)

    def default_initial_state(self) -> np.ndarray:
        """Smooth reference initial datum: cos(pi r / 2R)."""
        return np.cos(np.pi * self.mesh.node_r / (2.0 * self.cfg.R))


def instantiate(cfg: ExperimentConfig) -> RunContext:
    cfg.validate()
    mesh = build_polar_mesh(cfg.R, cfg.n_r, cfg.n_theta)
    A = _parse_a_spec(cfg.A_spec)
    coeffs = CoefficientSet(A=A, b_surf=cfg.b_surf, a1=cfg.a1, a2=cfg.a2,
                            B1=np.asarray(cfg.B1, dtype=float), B2=cfg.B2,
                            beta0=cfg.beta0)
    region = ControlRegion.disk(mesh, cfg.g0_center, cfg.g0_radius, cfg.g1_radius)
    tree = build_tree(cfg.n_t, cfg.T)
    psi = build_psi(mesh, cfg.g1_radius)
    times = half_step_times(cfg.T, cfg.n_t)
    norms = coeffs.sup_norms(mesh, times)
    threshold = min_lambda_adjoint(cfg.T, norms, cfg.lambda0)
    lam = cfg.lambda_factor * threshold
    return RunContext(cfg=cfg, mesh=mesh, coeffs=coeffs, region=region,
                      tree=tree, psi=psi, norms=norms, lam=lam,
                      lambda_threshold=threshold)
