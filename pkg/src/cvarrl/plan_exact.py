"""Exact augmented-budget planning and brute-force CVaR ground truth.

The planner minimizes V(s, c) = E[(c - R)^+ - sum of bonuses]; the CVaR
objective is then max_i { i*upsilon - V_1(s1, i*upsilon) / tau }.
Budget indices below zero are clamped to zero, which is absorbing: a spent
budget contributes nothing to (c - R)^+ whatever happens next.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .env_core import AugmentedPolicy, LowRankModel, RewardModel
from .errors import InstanceTooLarge
from .risk_math import BudgetGrid, ReturnDistribution, cvar_objective_from_values, cvar_of_distribution

MAX_ORACLE_CELLS = 10**7


@dataclass(frozen=True, eq=False)
class ValueTable:
    V: np.ndarray       # (H + 1, S, I)
    greedy: np.ndarray  # (H, S, I)
    grid: BudgetGrid

    @property
    def horizon(self) -> int:
        return self.greedy.shape[0]

    def to_json(self) -> str:
        return json.dumps({"H": self.horizon, "grid": {"upsilon": self.grid.upsilon, "size": self.grid.size},
                           "V": self.V.tolist()})


def _shifted(V_next: np.ndarray, G: int) -> np.ndarray:
    """out[k, s, i] = V_next[s, max(i - k, 0)]."""
    I = V_next.shape[-1]
    idx = np.maximum(np.arange(I)[None, :] - np.arange(G)[:, None], 0)
    return V_next[:, idx].transpose(1, 0, 2)


def backup(P_h: np.ndarray, rpmf_h: np.ndarray, V_next: np.ndarray) -> np.ndarray:
    """E[V_next(s', i - r)] as an (S, A, I) array."""
    sh = _shifted(V_next, rpmf_h.shape[-1])
    return np.einsum("sak,sat,kti->sai", rpmf_h, P_h, sh, optimize=True)


def augmented_vi(model: LowRankModel, rewards: RewardModel, bonus: np.ndarray | None,
                 grid: BudgetGrid) -> ValueTable:
    """Backward induction over (step, state, budget index) with bonus subtracted."""
    H, S, A = model.horizon, model.num_states, model.num_actions
    rpmf = rewards.grid_pmf(grid.upsilon)
    V = np.empty((H + 1, S, grid.size))
    V[H] = grid.values[None, :]
    greedy = np.empty((H, S, grid.size), dtype=int)
    for h in range(H - 1, -1, -1):
        Q = backup(model.P[h], rpmf[h], V[h + 1])
        if bonus is not None:
            Q = Q - bonus[h][:, :, None]
        greedy[h] = np.argmin(Q, axis=1)
        V[h] = np.min(Q, axis=1)
    return ValueTable(V, greedy, grid)


def greedy_policy(table: ValueTable, num_actions: int) -> AugmentedPolicy:
    return AugmentedPolicy.deterministic(table.greedy, num_actions, table.grid.upsilon)


def plan_cvar(table: ValueTable, tau: float, grid: BudgetGrid, s1: int, num_actions: int):
    """(best budget index, CVaR objective value, greedy policy)."""
    i_star, value = cvar_objective_from_values(table.V[0, s1], tau, grid)
    return i_star, value, greedy_policy(table, num_actions)


def policy_value_table(model: LowRankModel, rewards: RewardModel, policy: AugmentedPolicy,
                       bonus: np.ndarray | None = None) -> np.ndarray:
    """V^pi[h, s, i] for a grid policy under the fixed-policy recursion."""
    H = model.horizon
    grid_size = policy.grid_size
    rpmf = rewards.grid_pmf(policy.upsilon)
    V = np.empty((H + 1, model.num_states, grid_size))
    V[H] = np.arange(grid_size)[None, :] * policy.upsilon
    for h in range(H - 1, -1, -1):
        Q = backup(model.P[h], rpmf[h], V[h + 1])
        if bonus is not None:
            Q = Q - bonus[h][:, :, None]
        V[h] = np.einsum("sai,sia->si", Q, policy.probs[h])
    return V


def evaluate_policy_exact(model: LowRankModel, rewards: RewardModel, policy: AugmentedPolicy,
                          c1_index: int, bonus: np.ndarray | None = None) -> float:
    """V^pi_1(s1, c1) = E[(c1 - R)^+ - sum_h b_h(s_h, a_h)], computed exactly."""
    return float(policy_value_table(model, rewards, policy, bonus)[0, model.s1, c1_index])


def _enumerate(model: LowRankModel, rewards: RewardModel, policy, c1: float, visit=None):
    """Forward enumeration of the joint law of (history state, raw return).

    ``policy`` is an AugmentedPolicy or a DiscretizedPolicyWrapper. Nodes are
    merged on (state, budget-tracking state, raw return so far).
    """
    nodes = {(model.s1, policy.initial_state(c1), 0.0): 1.0}
    for h in range(model.horizon):
        nxt: dict = {}
        for (s, q, ret), p in nodes.items():
            probs_a = policy.probs[h, s, policy.index_of_state(q)]
            for a in np.flatnonzero(probs_a):
                pa = p * probs_a[a]
                if visit is not None:
                    visit(h, s, a, pa)
                row = model.P[h, s, a]
                for k in np.flatnonzero(rewards.pmf[h, s, a]):
                    r = float(rewards.values[h, s, a, k])
                    pr = pa * rewards.pmf[h, s, a, k]
                    q2 = policy.next_state(q, r)
                    for s2 in np.flatnonzero(row):
                        key = (int(s2), q2, ret + r)
                        nxt[key] = nxt.get(key, 0.0) + pr * row[s2]
        nodes = nxt
    return nodes


def return_distribution(model: LowRankModel, rewards: RewardModel, policy, c1: float) -> ReturnDistribution:
    """Exact distribution of the raw return sum_h r_h from (s1, c1)."""
    nodes = _enumerate(model, rewards, policy, c1)
    return ReturnDistribution.from_pairs((key[2], p) for key, p in nodes.items())


def occupancy_exact(model: LowRankModel, rewards: RewardModel, policy, c1: float) -> np.ndarray:
    """d[h, s, a]: probability of visiting (s, a) at step h."""
    occ = np.zeros((model.horizon, model.num_states, model.num_actions))

    def visit(h, s, a, p):
        occ[h, s, a] += p

    _enumerate(model, rewards, policy, c1, visit)
    return occ


def cvar_of_policy(model: LowRankModel, rewards: RewardModel, policy, c1: float, tau: float) -> float:
    """CVaR_tau of the return obtained by playing ``policy`` from budget c1."""
    return cvar_of_distribution(return_distribution(model, rewards, policy, c1), tau)


@dataclass(frozen=True, eq=False)
class OracleResult:
    cvar_star: float
    best_index: int
    policy: AugmentedPolicy
    values: np.ndarray            # min_pi V_1(s1, i) for every grid index
    return_dist: ReturnDistribution  # return law of the optimal pair


def enumerate_cvar_oracle(model: LowRankModel, rewards: RewardModel, tau: float,
                          grid: BudgetGrid) -> OracleResult:
    """Ground-truth CVaR* by recursion over full return distributions.

    Deliberately shares no code with augmented_vi: each augmented state
    (h, s, i) carries the complete pmf of its future return (in reward-grid
    units) under the best continuation, and the value is read off that pmf.
    """
    H, S, A = model.horizon, model.num_states, model.num_actions
    if S * A * H * grid.size > MAX_ORACLE_CELLS:
        raise InstanceTooLarge(f"{S * A * H * grid.size} cells exceeds {MAX_ORACLE_CELLS}")
    rpmf = rewards.grid_pmf(grid.upsilon)
    P = model.P
    ups = grid.upsilon

    def shortfall(i: int, pmf: dict) -> float:
        return sum(p * max(i - R, 0) for R, p in pmf.items()) * ups

    @lru_cache(maxsize=None)
    def solve(h: int, s: int, i: int):
        if h == H:
            return 0, {0: 1.0}, 0.0
        best = None
        for a in range(A):
            pmf: dict = {}
            for k in range(rpmf.shape[-1]):
                pk = rpmf[h, s, a, k]
                if pk == 0.0:
                    continue
                for s2 in range(S):
                    w = pk * P[h, s, a, s2]
                    if w == 0.0:
                        continue
                    _, cont, _ = solve(h + 1, s2, max(i - k, 0))
                    for R, p in cont.items():
                        pmf[R + k] = pmf.get(R + k, 0.0) + w * p
            v = shortfall(i, pmf)
            if best is None or v < best[2]:
                best = (a, pmf, v)
        return best

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10 * H + 100))
    try:
        values = np.array([solve(0, model.s1, i)[2] for i in range(grid.size)])
        actions = np.zeros((H, S, grid.size), dtype=int)
        for h in range(H):
            for s in range(S):
                for i in range(grid.size):
                    actions[h, s, i] = solve(h, s, i)[0]
        best_i, _ = cvar_objective_from_values(values, tau, grid)
        opt = solve(0, model.s1, best_i)[1]
    finally:
        sys.setrecursionlimit(old_limit)
    dist = ReturnDistribution.from_pairs((R * ups, p) for R, p in opt.items())
    policy = AugmentedPolicy.deterministic(actions, A, ups)
    return OracleResult(cvar_of_distribution(dist, tau), best_i, policy, values, dist)
