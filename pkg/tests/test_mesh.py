import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humdisk.mesh import (CoefficientSet, ControlRegion, EllipticityError,
                          MeshError, assemble_forms, build_polar_mesh,
                          integrate_bulk, integrate_surface)


def test_bulk_quadrature_is_exact_disk_area():
    mesh = build_polar_mesh(1.0, 12, 24)
    assert mesh.w_bulk.sum() == pytest.approx(np.pi, abs=1e-14)


def test_surface_quadrature_is_exact_circumference():
    mesh = build_polar_mesh(2.0, 8, 16)
    assert mesh.w_surf.sum() == pytest.approx(4.0 * np.pi, rel=1e-14)


def test_dof_count_and_layout():
    mesh = build_polar_mesh(1.0, 6, 12)
    assert mesh.n_dof == 1 + 6 * 12
    assert len(mesh.boundary) == 12
    assert np.all(mesh.node_r[mesh.boundary] == 1.0)
    assert mesh.node_r[0] == 0.0


def test_bulk_integral_second_order():
    exact = np.pi / 2.0  # integral of r^2 over the unit disk
    errs = []
    for n in (8, 16):
        mesh = build_polar_mesh(1.0, n, 2 * n)
        errs.append(abs(integrate_bulk(mesh, mesh.node_r**2) - exact))
    assert errs[1] < errs[0] / 2.5


def test_surface_integral_of_trig():
    mesh = build_polar_mesh(1.0, 8, 64)
    theta = np.arctan2(mesh.node_xy[mesh.boundary, 1],
                       mesh.node_xy[mesh.boundary, 0])
    val = integrate_surface(mesh, np.sin(theta) ** 2)
    assert val == pytest.approx(np.pi, rel=1e-3)


def test_element_gradient_second_order_on_linears():
    errs = []
    for n in (8, 16):
        mesh = build_polar_mesh(1.0, n, 2 * n)
        f = 2.0 * mesh.node_xy[:, 0] - 3.0 * mesh.node_xy[:, 1] + 1.0
        g = (mesh.grad @ f).reshape(mesh.n_el, 2)
        errs.append(max(float(np.max(np.abs(g[:, 0] - 2.0))),
                        float(np.max(np.abs(g[:, 1] + 3.0)))))
    assert errs[1] < errs[0] / 3.0


def test_surface_gradient_second_order():
    errs = []
    for n in (24, 48):
        mesh = build_polar_mesh(1.0, 6, n)
        theta = np.arctan2(mesh.node_xy[:, 1], mesh.node_xy[:, 0])
        g = mesh.surf_grad @ np.sin(theta)
        theta_e = np.arctan2(mesh.edge_xy[:, 1], mesh.edge_xy[:, 0])
        errs.append(float(np.max(np.abs(g - np.cos(theta_e)))))
    assert errs[1] < errs[0] / 3.0


def test_stiffness_symmetric_with_constant_kernel():
    mesh = build_polar_mesh(1.0, 8, 16)
    forms = assemble_forms(mesh, CoefficientSet(), 0.0)
    S = forms.S
    assert abs(S - S.T).max() <= 1e-13 * abs(S).max()
    assert np.max(np.abs(S @ np.ones(mesh.n_dof))) <= 1e-13 * abs(S).max()


def test_stiffness_positive_on_nonconstants():
    mesh = build_polar_mesh(1.0, 8, 16)
    forms = assemble_forms(mesh, CoefficientSet(), 0.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.standard_normal(mesh.n_dof)
        v -= v.mean()
        assert float(v @ (forms.S @ v)) > 0.0


def test_non_spd_diffusion_rejected():
    mesh = build_polar_mesh(1.0, 6, 12)
    bad = CoefficientSet(A=np.array([[1.0, 3.0], [3.0, 1.0]]))
    with pytest.raises(EllipticityError):
        assemble_forms(mesh, bad, 0.0)


def test_mesh_size_validation():
    with pytest.raises(MeshError):
        build_polar_mesh(1.0, 3, 8)
    with pytest.raises(MeshError):
        build_polar_mesh(-1.0, 8, 16)


def test_control_region_indicator_masks():
    mesh = build_polar_mesh(1.0, 12, 24)
    region = ControlRegion.disk(mesh, (0.0, 0.0), 0.6, 0.3)
    assert np.all(region.indicator[mesh.boundary] == 0.0)
    assert np.all(region.indicator[mesh.node_r > 0.6] == 0.0)
    assert region.indicator[0] == 1.0


def test_control_region_requires_strict_nesting():
    mesh = build_polar_mesh(1.0, 12, 24)
    with pytest.raises((MeshError, ValueError)):
        ControlRegion.disk(mesh, (0.0, 0.0), 0.3, 0.3)


@settings(max_examples=10, deadline=None)
@given(n_r=st.integers(min_value=4, max_value=10),
       half_t=st.integers(min_value=4, max_value=10),
       R=st.floats(min_value=0.5, max_value=3.0))
def test_quadrature_exactness_property(n_r, half_t, R):
    mesh = build_polar_mesh(R, n_r, 2 * half_t)
    assert mesh.w_bulk.sum() == pytest.approx(np.pi * R**2, rel=1e-13)
    assert mesh.w_surf.sum() == pytest.approx(2.0 * np.pi * R, rel=1e-13)
    assert np.all(mesh.w_bulk > 0.0)
    assert np.all(mesh.w_surf > 0.0)
