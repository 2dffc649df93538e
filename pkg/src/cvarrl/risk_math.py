"""CVaR functional, budget grid and reward discretization.

Returns are maximized, so CVaR here is the mean of the *lowest* tau-fraction
of outcomes:

    CVaR_tau(X) = sup_c { c - E[(c - X)^+] / tau }
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySamples, InvalidTau

SNAP = 1e-9


def _check_tau(tau: float) -> None:
    if not (0.0 < tau <= 1.0):
        raise InvalidTau(f"tau must lie in (0, 1], got {tau}")


def ceil_index(x: float, upsilon: float) -> int:
    """ceil(x / upsilon) with a snap tolerance so on-grid inputs are fixed points."""
    return int(math.ceil(x / upsilon - SNAP))


def round_index(x: float, upsilon: float) -> int:
    """Round-half-up of x / upsilon (snap-tolerant)."""
    return int(math.floor(x / upsilon + 0.5 + SNAP))


@dataclass(frozen=True)
class BudgetGrid:
    """Budgets i * upsilon for i in 0..ceil(H / upsilon)."""

    upsilon: float
    horizon: int

    def __post_init__(self):
        if self.upsilon <= 0:
            raise ValueError("upsilon must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def max_index(self) -> int:
        return ceil_index(self.horizon, self.upsilon)

    @property
    def size(self) -> int:
        return self.max_index + 1

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.size) * self.upsilon

    @property
    def reward_size(self) -> int:
        """Number of reward grid points i * upsilon, i in 0..ceil(1 / upsilon)."""
        return ceil_index(1.0, self.upsilon) + 1

    @property
    def reward_values(self) -> np.ndarray:
        return np.arange(self.reward_size) * self.upsilon

    def index_of(self, c: float) -> int:
        """Grid index used to look up a raw budget; negative budgets clamp to 0."""
        return min(max(round_index(c, self.upsilon), 0), self.max_index)


@dataclass(frozen=True)
class ReturnDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if support.shape != probs.shape or support.ndim != 1 or support.size == 0:
            raise ValueError("support and probs must be equal-length nonempty vectors")
        if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a probability vector")
        if np.unique(support).size != support.size:
            raise ValueError("support values must be distinct")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_pairs(cls, pairs, atol: float = 1e-12) -> "ReturnDistribution":
        """Build from (value, prob) pairs, merging values closer than atol."""
        items = sorted((float(v), float(p)) for v, p in pairs if p > 0)
        support, probs = [], []
        for v, p in items:
            if support and v - support[-1] <= atol:
                probs[-1] += p
            else:
                support.append(v)
                probs.append(p)
        return cls(np.array(support), np.array(probs))

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)

    def shifted(self, a: float) -> "ReturnDistribution":
        """Law of X + a; support points that collide in floating point are merged."""
        return ReturnDistribution.from_pairs(zip(self.support + a, self.probs))


def cvar_objective(dist: ReturnDistribution, c: float, tau: float) -> float:
    return float(c - np.dot(dist.probs, np.maximum(c - dist.support, 0.0)) / tau)


def cvar_of_distribution(dist: ReturnDistribution, tau: float) -> float:
    """Exact CVaR of a discrete return distribution.

    The objective is concave and piecewise linear in c with kinks at the
    support points, so the supremum is attained at one of them (the VaR).
    """
    return value_at_risk(dist, tau)[1]


def value_at_risk(dist: ReturnDistribution, tau: float) -> tuple[float, float]:
    """(c*, CVaR) where c* is the smallest support point attaining the sup."""
    _check_tau(tau)
    x = dist.support
    gaps = np.maximum(x[:, None] - x[None, :], 0.0)
    obj = x - gaps @ dist.probs / tau
    order = np.argsort(x, kind="stable")
    best = order[int(np.argmax(obj[order]))]
    return float(x[best]), float(obj[best])


def empirical_cvar(samples, tau: float) -> float:
    """Plug-in CVaR estimate using the ceil(tau * n)-th order statistic as VaR."""
    _check_tau(tau)
    x = np.sort(np.asarray(samples, dtype=float), kind="stable")
    n = x.size
    if n == 0:
        raise EmptySamples("empirical_cvar needs at least one sample")
    m = max(int(math.ceil(tau * n - SNAP)), 1)
    c_hat = x[m - 1]
    return float(c_hat - np.maximum(c_hat - x, 0.0).sum() / (n * tau))


def discretize_index(r: float, upsilon: float) -> int:
    return max(ceil_index(r, upsilon), 0)


def discretize_reward(r: float, grid: BudgetGrid) -> float:
    """Round a reward up to the grid: U(r) = ceil(r / upsilon) * upsilon."""
    return discretize_index(r, grid.upsilon) * grid.upsilon


def cvar_objective_from_values(v1, tau: float, grid: BudgetGrid) -> tuple[int, float]:
    """argmax_i { i*upsilon - v1[i] / tau } over the budget grid, smallest index on ties."""
    _check_tau(tau)
    v1 = np.asarray(v1, dtype=float)
    if v1.shape != (grid.size,):
        raise ValueError(f"expected {grid.size} grid values, got shape {v1.shape}")
    obj = grid.values - v1 / tau
    best = int(np.argmax(obj))
    return best, float(obj[best])
