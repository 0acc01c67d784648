import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humdisk.stochastics import (MAX_N_T, AdaptedField, TreeError, build_tree,
                                 brownian_field, brownian_increments,
                                 cond_expect, martingale_part,
                                 tree_expectation)


def test_tree_guards():
    with pytest.raises(TreeError):
        build_tree(0, 1.0)
    with pytest.raises(TreeError):
        build_tree(4, -1.0)
    with pytest.raises(TreeError):
        build_tree(MAX_N_T + 1, 1.0)
    big = build_tree(MAX_N_T + 1, 1.0, allow_large=True)
    assert big.n_t == MAX_N_T + 1


def test_tree_counts():
    tree = build_tree(3, 2.0)
    assert tree.dt == pytest.approx(2.0 / 3.0)
    assert tree.node_count == 15
    assert tree.level_width(2) == 4


def test_cond_expect_and_martingale_roundtrip():
    rng = np.random.default_rng(7)
    dt = 0.25
    children = rng.standard_normal((8, 5))
    m = cond_expect(children)
    g = martingale_part(children, dt)
    # reconstruct children from (conditional mean, dW-integrand)
    up = m + g * np.sqrt(dt)
    down = m - g * np.sqrt(dt)
    rebuilt = np.empty_like(children)
    rebuilt[0::2] = up
    rebuilt[1::2] = down
    assert np.allclose(rebuilt, children, atol=1e-14)


def test_cond_expect_requires_full_level():
    with pytest.raises(TreeError):
        cond_expect(np.zeros((3, 2)))
    with pytest.raises(TreeError):
        martingale_part(np.zeros((5, 2)), 0.1)


def test_tower_property():
    rng = np.random.default_rng(1)
    children = rng.standard_normal((16, 3))
    direct = tree_expectation(children)
    nested = tree_expectation(cond_expect(children))
    assert np.allclose(direct, nested, atol=1e-14)


def test_brownian_increment_moments():
    tree = build_tree(5, 1.0)
    for k in range(tree.n_t):
        inc = brownian_increments(tree, k)
        assert inc.shape == (2 ** (k + 1),)
        assert tree_expectation(cond_expect(inc)) == pytest.approx(0.0, abs=1e-15)
        # Ito isometry at one step: E[(dW)^2] = dt
        assert tree_expectation(inc**2) == pytest.approx(tree.dt, rel=1e-14)


def test_brownian_field_is_a_martingale_with_right_variance():
    tree = build_tree(6, 2.0)
    w = brownian_field(tree)
    for k in range(tree.n_t):
        assert np.allclose(cond_expect(w[k + 1]), w[k], atol=1e-14)
    for k in range(tree.n_t + 1):
        var = tree_expectation(w[k][:, 0] ** 2)
        assert var == pytest.approx(k * tree.dt, abs=1e-13)


def test_adapted_field_shape_errors():
    tree = build_tree(3, 1.0)
    f = AdaptedField(tree, 4)
    assert f.last_level == 3
    assert f[2].shape == (4, 4)
    with pytest.raises(TreeError):
        f[2] = np.zeros((3, 4))
    with pytest.raises(TreeError):
        AdaptedField(tree, 4, levels=[np.zeros((2, 4))])


def test_adapted_field_copy_is_deep():
    tree = build_tree(2, 1.0)
    f = AdaptedField(tree, 2)
    g = f.copy()
    g[0] = np.ones((1, 2))
    assert np.all(f[0] == 0.0)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(min_value=0, max_value=6),
       seed=st.integers(min_value=0, max_value=10**6))
def test_conditional_expectation_is_contraction_property(k, seed):
    rng = np.random.default_rng(seed)
    children = rng.standard_normal((2 ** (k + 1), 2))
    m = cond_expect(children)
    assert np.max(np.abs(m)) <= np.max(np.abs(children)) + 1e-15
    assert np.allclose(tree_expectation(m), tree_expectation(children), atol=1e-12)
