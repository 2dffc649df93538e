"""Executable checks of the structural facts the algorithms rely on.

Each ``check_*`` function draws one random case from ``rng`` and returns a
CheckResult whose ``ok`` field is the verdict; ``run_suite`` repeats a
check and tallies. Both sides of every comparison are computed exactly
(dynamic programming or forward enumeration), never by sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env_core import (LowRankModel, RewardModel, make_continuous_rewards, make_tabular_lowrank, random_policy,
                       wrap_discretized_policy, discretize_rewards)
from .model_learn import TransitionDataset, make_model_class, mle_fit, model_tv_error
from .plan_exact import cvar_of_policy, occupancy_exact, policy_value_table
from .risk_math import BudgetGrid


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    lhs: float
    rhs: float
    detail: str = ""


# -- discretization ------------------------------------------------------------

def check_sandwich(rng: np.random.Generator, upsilon: float | None = None, tau: float | None = None,
                   S: int = 3, A: int = 2, H: int = 3) -> CheckResult:
    """0 <= CVaR(R_bar(pi, c)) - CVaR(R(pi_bar, c)) <= H upsilon / tau + 1e-9.

    R_bar is the return of grid policy pi in the discretized MDP; R is the
    return of its wrapper played on the raw continuous rewards.
    """
    upsilon = upsilon if upsilon is not None else float(rng.choice([0.05, 0.1, 0.25]))
    tau = tau if tau is not None else float(rng.choice([0.2, 0.5]))
    grid = BudgetGrid(upsilon, H)
    model, _ = make_tabular_lowrank(S, A, H, rng, upsilon=upsilon)
    rewards = make_continuous_rewards(H, S, A, rng)
    rewards_bar = discretize_rewards(rewards, upsilon)
    policy = random_policy(H, S, grid, A, rng, deterministic=bool(rng.integers(2)))
    c1 = int(rng.integers(grid.size)) * upsilon
    upper = cvar_of_policy(model, rewards_bar, policy, c1, tau)
    lower = cvar_of_policy(model, rewards, wrap_discretized_policy(policy, c1), c1, tau)
    gap = upper - lower
    bound = H * upsilon / tau
    return CheckResult(0.0 <= gap <= bound + 1e-9, gap, bound, f"upsilon={upsilon} tau={tau} c1={c1:.2f}")


# -- simulation lemmas ---------------------------------------------------------

def check_risk_sensitive_simulation(rng: np.random.Generator, S: int = 3, A: int = 2, H: int = 3,
                                    upsilon: float = 0.1) -> CheckResult:
    """V_P(s1, c) - V_Phat(s1, c) <= H * sum_h E_{d_h^P}[ ||P_h - Phat_h||_1 ], asserted exactly."""
    grid = BudgetGrid(upsilon, H)
    model, rewards = make_tabular_lowrank(S, A, H, rng, upsilon=upsilon)
    other = LowRankModel.from_tabular(rng.dirichlet(np.ones(S), size=(H, S, A)), model.s1)
    policy = random_policy(H, S, grid, A, rng)
    i1 = int(rng.integers(grid.reward_size))          # c in [0, 1]
    c1 = i1 * upsilon
    lhs = policy_value_table(model, rewards, policy)[0, model.s1, i1] \
        - policy_value_table(other, rewards, policy)[0, model.s1, i1]
    occ = occupancy_exact(model, rewards, policy, c1)
    f = np.abs(model.P - other.P).sum(-1)
    rhs = H * float((occ * f).sum())
    return CheckResult(bool(lhs <= rhs), float(lhs), rhs)


def _markov_values(P: np.ndarray, r: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """V[h, s] for a Markov policy pi[h, s, a] with mean rewards r[h, s, a]; V[H] = 0."""
    H, S = P.shape[:2]
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q = r[h] + P[h] @ V[h + 1]
        V[h] = (pi[h] * Q).sum(-1)
    return V


def _markov_occupancy(P: np.ndarray, pi: np.ndarray, s1: int) -> np.ndarray:
    H, S, A = pi.shape
    d = np.zeros((H, S, A))
    mu = np.zeros(S)
    mu[s1] = 1.0
    for h in range(H):
        d[h] = mu[:, None] * pi[h]
        mu = np.einsum("sa,sat->t", d[h], P[h])
    return d


def check_risk_neutral_simulation(rng: np.random.Generator, S: int = 4, A: int = 3, H: int = 4) -> CheckResult:
    """Both telescoping forms of V_hat(s1) - V(s1) agree with the direct difference within 1e-9."""
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    P_hat = rng.dirichlet(np.ones(S), size=(H, S, A))
    r, r_hat = rng.random((H, S, A)), rng.random((H, S, A))
    pi = rng.dirichlet(np.ones(A), size=(H, S))
    s1 = int(rng.integers(S))
    V, V_hat = _markov_values(P, r, pi), _markov_values(P_hat, r_hat, pi)
    direct = V_hat[0, s1] - V[0, s1]
    d, d_hat = _markov_occupancy(P, pi, s1), _markov_occupancy(P_hat, pi, s1)
    dP = P_hat - P
    form1 = sum((d_hat[h] * (r_hat[h] - r[h] + dP[h] @ V[h + 1])).sum() for h in range(H))
    form2 = sum((d[h] * (r_hat[h] - r[h] + dP[h] @ V_hat[h + 1])).sum() for h in range(H))
    err = max(abs(form1 - direct), abs(form2 - direct))
    return CheckResult(bool(err <= 1e-9), float(direct), float(form1), f"form2={form2:.12g} err={err:.2e}")


# -- linear algebra ------------------------------------------------------------

def random_feature_stream(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """n vectors with norms uniform in [0, 1] and uniformly random directions."""
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * rng.random((n, 1))


def check_eigen_lemma(rng: np.random.Generator, n: int = 1000, d: int | None = None, lam: float = 1.0) -> CheckResult:
    """sum_j phi_j^T Lambda_t^-1 phi_j <= d with Lambda_t = lam I + sum_j phi_j phi_j^T."""
    d = d if d is not None else int(rng.choice([2, 8]))
    phi = random_feature_stream(rng, n, d)
    gram = lam * np.eye(d) + phi.T @ phi
    lhs = float(np.einsum("nd,dn->", phi, np.linalg.solve(gram, phi.T)))
    return CheckResult(lhs <= d, lhs, float(d), f"d={d}")


def check_elliptical_potential(rng: np.random.Generator, n: int = 1000, d: int | None = None) -> CheckResult:
    """sum_j phi_j^T Lambda_{j-1}^-1 phi_j <= 2 log(det Lambda_n / det Lambda_0) with Lambda_0 = I."""
    d = d if d is not None else int(rng.choice([2, 8]))
    phi = random_feature_stream(rng, n, d)
    gram = np.eye(d)
    lhs = 0.0
    for x in phi:
        lhs += float(x @ np.linalg.solve(gram, x))
        gram += np.outer(x, x)
    _, logdet = np.linalg.slogdet(gram)
    rhs = 2.0 * logdet
    return CheckResult(lhs <= rhs, lhs, rhs, f"d={d}")


# -- maximum likelihood ------------------------------------------------------

def check_mle(rng: np.random.Generator, k: int = 5000, class_size: int = 8, delta: float = 0.05,
              S: int = 3, A: int = 2, H: int = 3, C: float = 10.0) -> CheckResult:
    """Averaged squared L1 model error after MLE on k tuples per step <= C log(|F|/delta) / k.

    Tuples come from a fixed behaviour distribution: s uniform, a uniform.
    The error is averaged over steps 0..H-2 and that same distribution.
    """
    truth, _ = make_tabular_lowrank(S, A, H, rng)
    cls = make_model_class(truth, class_size, rng)
    ds = TransitionDataset(H, S, A)
    for h in range(H - 1):
        s = rng.integers(S, size=k)
        a = rng.integers(A, size=k)
        cdf = np.cumsum(truth.P[h, s, a], axis=-1)
        s_next = np.minimum((rng.random(k)[:, None] >= cdf).sum(-1), S - 1)
        for t in range(k):
            ds.add("D", h, int(s[t]), int(a[t]), int(s_next[t]))
    errs = []
    for h in range(H - 1):
        P_hat = cls.candidates[mle_fit(ds, cls, h)].P[h]
        sq = [model_tv_error(P_hat[s, a], truth.P[h, s, a]) ** 2 for s in range(S) for a in range(A)]
        errs.append(float(np.mean(sq)))
    err = float(np.mean(errs))
    bound = C * math.log(class_size / delta) / k
    return CheckResult(err <= bound, err, bound)


SUITES = {
    "sandwich": check_sandwich,
    "sim-risk-sensitive": check_risk_sensitive_simulation,
    "sim-risk-neutral": check_risk_neutral_simulation,
    "eigen": check_eigen_lemma,
    "elliptical": check_elliptical_potential,
    "mle": check_mle,
}


def run_suite(name: str, trials: int, seed: int = 0) -> list[CheckResult]:
    check = SUITES[name]
    seeds = np.random.SeedSequence([int(seed), len(name)]).spawn(trials)
    return [check(np.random.default_rng(s)) for s in seeds]
