"""Discrete Brownian filtration on a binomial tree and fields adapted to it.

Time level k has 2^k nodes.  The children of node i at level k are 2*i
(increment +sqrt(dt)) and 2*i + 1 (increment -sqrt(dt)), each with
probability 1/2.  An adapted field stores one array of shape
(2^k, n_dof) per level, so a value can only ever depend on its own path
prefix -- adaptedness is structural, not checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_N_T = 14


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class BinomialTree:
    n_t: int
    T: float

    def __post_init__(self):
        if self.n_t < 1:
            raise TreeError("need at least one time step")
        if self.T <= 0:
            raise TreeError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    @property
    def node_count(self) -> int:
        return 2 ** (self.n_t + 1) - 1

    def level_width(self, k: int) -> int:
        return 2**k


def build_tree(n_t: int, T: float, allow_large: bool = False) -> BinomialTree:
    if n_t > MAX_N_T and not allow_large:
        raise TreeError(
            f"n_t={n_t} exceeds the memory guard ({MAX_N_T}); "
            "pass allow_large=True to override"
        )
    return BinomialTree(n_t=n_t, T=T)


class AdaptedField:
    """One (2^k, n_dof) array per tree level, levels 0..last_level."""

    def __init__(self, tree: BinomialTree, n_dof: int,
                 levels: list[np.ndarray] | None = None,
                 last_level: int | None = None):
        self.tree = tree
        self.n_dof = n_dof
        if levels is not None:
            for k, arr in enumerate(levels):
                if arr.shape != (2**k, n_dof):
                    raise TreeError(
                        f"level {k} array has shape {arr.shape}, "
                        f"expected {(2**k, n_dof)}"
                    )
            self.levels = levels
        else:
            if last_level is None:
                last_level = tree.n_t
            self.levels = [np.zeros((2**k, n_dof)) for k in range(last_level + 1)]

    @property
    def last_level(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, k: int) -> np.ndarray:
        return self.levels[k]

    def __setitem__(self, k: int, value: np.ndarray):
        value = np.asarray(value, dtype=float)
        if value.shape != (2**k, self.n_dof):
            raise TreeError(
                f"level {k} assignment has shape {value.shape}, "
                f"expected {(2**k, self.n_dof)}"
            )
        self.levels[k] = value

    def copy(self) -> "AdaptedField":
        return AdaptedField(self.tree, self.n_dof,
                            levels=[a.copy() for a in self.levels])


def cond_expect(children: np.ndarray) -> np.ndarray:
    """E[. | F_k] of a level-(k+1) array: the average of each sibling pair.

    children has shape (2^{k+1}, ...); returns shape (2^k, ...).
    """
    if children.shape[0] < 2 or children.shape[0] % 2 != 0:
        raise TreeError("conditional expectation needs a full child level")
    up = children[0::2]
    down = children[1::2]
    return 0.5 * (up + down)


def martingale_part(children: np.ndarray, dt: float) -> np.ndarray:
    """The dW-integrand representing a level-(k+1) array from level k."""
    if children.shape[0] < 2 or children.shape[0] % 2 != 0:
        raise TreeError("martingale representation needs a full child level")
    up = children[0::2]
    down = children[1::2]
    return (up - down) / (2.0 * np.sqrt(dt))


def tree_expectation(values: np.ndarray) -> np.ndarray:
    """E[.] over the 2^k equiprobable nodes of one level."""
    return np.asarray(values).mean(axis=0)


def brownian_increments(tree: BinomialTree, k: int) -> np.ndarray:
    """The (2^{k+1},) array of increments leading into level k+1 nodes."""
    sd = tree.sqrt_dt
    return np.tile([sd, -sd], 2**k)


def brownian_field(tree: BinomialTree, n_dof: int = 1) -> AdaptedField:
    """W itself as an adapted field (spatially constant)."""
    w = AdaptedField(tree, n_dof)
    path = np.zeros(1)
    for k in range(tree.n_t):
        w[k] = np.repeat(path[:, None], n_dof, axis=1)
        inc = brownian_increments(tree, k)
        path = np.repeat(path, 2) + inc
    w[tree.n_t] = np.repeat(path[:, None], n_dof, axis=1)
    return w
