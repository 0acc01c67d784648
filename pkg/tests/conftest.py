import numpy as np
import pytest

from humdisk.control import JepsProblem, PenaltyConfig
from humdisk.forward import build_level_operators
from humdisk.mesh import CoefficientSet, ControlRegion, build_polar_mesh
from humdisk.stochastics import build_tree
from humdisk.weights import (build_psi, evaluate_weights, half_step_times,
                             min_lambda_adjoint)

REF = dict(R=1.0, n_r=12, n_theta=24, n_t=8, T=1.0,
           g0_center=(0.0, 0.0), g0_radius=0.6, g1_radius=0.3)


@pytest.fixture(scope="session")
def ref_mesh():
    return build_polar_mesh(REF["R"], REF["n_r"], REF["n_theta"])


@pytest.fixture(scope="session")
def ref_coeffs():
    return CoefficientSet(a1=1.0, B1=(1.0, 0.0))


@pytest.fixture(scope="session")
def ref_region(ref_mesh):
    return ControlRegion.disk(ref_mesh, REF["g0_center"], REF["g0_radius"],
                              REF["g1_radius"])


@pytest.fixture(scope="session")
def ref_tree():
    return build_tree(REF["n_t"], REF["T"])


@pytest.fixture(scope="session")
def ref_ops(ref_mesh, ref_coeffs, ref_tree):
    return build_level_operators(ref_mesh, ref_coeffs, ref_tree)


@pytest.fixture(scope="session")
def ref_psi(ref_mesh):
    return build_psi(ref_mesh, REF["g1_radius"])


@pytest.fixture(scope="session")
def ref_lam(ref_mesh, ref_coeffs, ref_ops):
    norms = ref_coeffs.sup_norms(ref_mesh, ref_ops.times)
    return 2.0 * min_lambda_adjoint(REF["T"], norms)


@pytest.fixture(scope="session")
def ref_ws(ref_psi, ref_mesh, ref_lam):
    return evaluate_weights(ref_psi, ref_mesh, lam=ref_lam, mu=1.0,
                            T=REF["T"], times=half_step_times(REF["T"], REF["n_t"]))


@pytest.fixture(scope="session")
def ref_problem(ref_mesh, ref_region, ref_coeffs, ref_ws, ref_tree, ref_ops):
    return JepsProblem(ref_mesh, ref_region, ref_coeffs, ref_ws, ref_tree,
                       PenaltyConfig(), ops=ref_ops)


@pytest.fixture(scope="session")
def ref_y0(ref_mesh):
    return np.cos(np.pi * ref_mesh.node_r / 2.0)


@pytest.fixture(scope="session")
def small_mesh():
    return build_polar_mesh(1.0, 4, 8)


@pytest.fixture(scope="session")
def small_tree():
    return build_tree(3, 1.0)
