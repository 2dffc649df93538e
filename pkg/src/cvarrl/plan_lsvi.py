"""CVaR-LSVI: least-squares value iteration on the discretized budget grid.

Features are phi_bar(s, a) = phi_hat(s, a) kron r(. | s, a), under which the
one-step backup E[V(s', i - r)] is linear. Each iteration fits ridge weights
w_h(i) for every budget index, acts greedily on the clipped, downward-shifted
estimate

    Q_h(s, i, a) = Clip_[-H, H](-b_h(s, a) + phi_bar^T w_h(i) - beta ||phi_bar||_{Lambda^-1})

and simulates one trajectory inside the learned model. Afterwards every
iterate's greedy policy is scored by Monte Carlo and the best is returned.

Implementation notes. Sample features take at most S*A distinct values, so
sum_j phi_bar_j y_j is accumulated from counts n[(s, a), k, s'] and the
fitted mean phi_bar^T Lambda^-1 (...) is evaluated through the small matrix
M = Phi_bar Lambda^-1 Phi_bar^T, which gets Sherman-Morrison rank-1 updates
and is rebuilt from a Cholesky factor of Lambda every ``REFRESH`` updates. Runs for
several start budgets are advanced in lockstep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .env_core import AugmentedPolicy, LowRankModel, RewardModel, sample_categorical, simulate_grid
from .errors import ConfigInvalid, DimensionMismatch, SingularMatrix
from .explore import quad_form
from .risk_math import BudgetGrid

REFRESH = 64


@dataclass(frozen=True)
class LsviConfig:
    grid: BudgetGrid
    lam: float = 1.0
    beta: float = 1.0
    T1: int = 200
    T2: int = 400

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigInvalid("lambda must be positive")
        if not self.beta >= 0:
            raise ConfigInvalid("beta must be nonnegative")
        if self.T1 < 1 or self.T2 < 1:
            raise ConfigInvalid("T1 and T2 must be >= 1")


def theory_params(H: int, d: int, upsilon: float, delta: float, eps: float, tau: float = 1.0,
                  c_beta: float = 1.0, c_T1: float = 1.0, c_T2: float = 1.0) -> tuple[float, int, int]:
    """(beta, T1, T2) from the planner's parameter rates with explicit constants.

    beta = c * H^1.5 d iota^0.25 / upsilon, T1 = c * H^5 d^3 iota / (upsilon^3 tau^2 eps^2),
    T2 = c * H^2 log(T1 / delta) / (tau^2 eps^2), iota = log^2(H d T1 / (upsilon delta)).
    iota depends on T1, so the pair is found by fixed-point iteration.
    """
    T1 = 1.0
    for _ in range(20):
        iota = math.log(H * d * T1 / (upsilon * delta)) ** 2
        T1_new = max(c_T1 * H**5 * d**3 * iota / (upsilon**3 * tau**2 * eps**2), 1.0)
        if abs(T1_new - T1) <= 1e-9 * T1_new:
            break
        T1 = T1_new
    iota = math.log(H * d * T1 / (upsilon * delta)) ** 2
    beta = c_beta * H**1.5 * d * iota**0.25 / upsilon
    T2 = c_T2 * H**2 * math.log(T1 / delta) / (tau**2 * eps**2)
    return beta, int(math.ceil(T1)), max(int(math.ceil(T2)), 1)


def tensor_feature(phi_hat, reward_pmf) -> np.ndarray:
    """phi_hat kron reward_pmf, index j * G + i."""
    phi_hat = np.asarray(phi_hat, dtype=float)
    reward_pmf = np.asarray(reward_pmf, dtype=float)
    if phi_hat.ndim != 1 or reward_pmf.ndim != 1:
        raise DimensionMismatch("tensor_feature takes two vectors")
    return np.kron(phi_hat, reward_pmf)


def tensor_features(phi_hat: np.ndarray, reward_pmf: np.ndarray) -> np.ndarray:
    """Batched tensor_feature: (H, S, A, d) x (H, S, A, G) -> (H, S, A, d * G)."""
    if phi_hat.shape[:3] != reward_pmf.shape[:3]:
        raise DimensionMismatch(f"{phi_hat.shape} vs {reward_pmf.shape}")
    out = phi_hat[..., :, None] * reward_pmf[..., None, :]
    return out.reshape(phi_hat.shape[:3] + (-1,))


def ridge_weights(features, targets, lam: float) -> np.ndarray:
    """Solve (lam I + X^T X) w = X^T y; targets may be (n,) or (n, m)."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.size == 0:
        D = X.shape[-1] if X.ndim == 2 else 0
        return np.zeros((D,) + y.shape[1:])
    gram = lam * np.eye(X.shape[1]) + X.T @ X
    return cho_solve(cho_factor(gram, lower=True), X.T @ y)


def q_estimate(phi_bar, w, bonus_val: float, beta: float, gram, H: int) -> float:
    """Clip_[-H, H](-bonus + phi_bar^T w - beta ||phi_bar||_{gram^-1})."""
    phi_bar = np.asarray(phi_bar, dtype=float)
    width = math.sqrt(max(float(quad_form(phi_bar, np.asarray(gram, dtype=float))), 0.0))
    return float(np.clip(-bonus_val + phi_bar @ np.asarray(w, dtype=float) - beta * width, -H, H))


@dataclass(eq=False)
class LsviWeights:
    """Regression state of the last iteration; it saw buffer[:-1]."""

    gram: np.ndarray      # (H, D, D)
    w: np.ndarray         # (H, D, I)
    buffer: np.ndarray    # (n, H, 4): s, a, reward index, s'


@dataclass(eq=False)
class LsviResult:
    value: float
    policy: AugmentedPolicy
    best_t: int
    estimates: np.ndarray     # Monte-Carlo value of each iterate's policy, (T1,)
    optimistic: np.ndarray    # regression estimate V^t_1(s1, i1), (T1,)
    i1: int
    max_weight_ratio: float = float("nan")
    weights: LsviWeights | None = field(default=None, repr=False)


def _batched_inv(gram: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("Gram matrix lost positive definiteness") from exc
    eye = np.broadcast_to(np.eye(gram.shape[-1]), gram.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def _gram(feats_h: np.ndarray, counts_h: np.ndarray, lam: float) -> np.ndarray:
    """lam I + sum_j phi_bar_j phi_bar_j^T from per-pair visit counts; batched over runs."""
    n = counts_h.sum(axis=(-2, -1))                                   # (B, SA)
    return lam * np.eye(feats_h.shape[-1]) + np.einsum("nd,bn,ne->bde", feats_h, n, feats_h)


def policy_eval_mc(model_hat: LowRankModel, rewards_disc: RewardModel, bonus: np.ndarray | None,
                   policy, i1, T2: int, rng: np.random.Generator, upsilon: float | None = None) -> np.ndarray:
    """Monte-Carlo estimate of E[(i1 u - R)^+ - sum_h b_h] for grid policies.

    ``policy`` is an AugmentedPolicy or an int array of deterministic actions
    (T, H, S, I); returns one estimate per policy (a float for a single
    AugmentedPolicy).
    """
    single = isinstance(policy, AugmentedPolicy)
    if single:
        upsilon = policy.upsilon
        probs = policy.probs
        if np.all((probs == 0) | (probs == 1)):
            return float(policy_eval_mc(model_hat, rewards_disc, bonus, probs.argmax(-1)[None],
                                        i1, T2, rng, upsilon)[0])
        return float(_eval_stochastic(model_hat, rewards_disc, bonus, policy, int(i1), T2, rng))
    if upsilon is None:
        raise ValueError("upsilon is required for raw action tables")
    rpmf = rewards_disc.grid_pmf(upsilon)
    actions = np.asarray(policy, dtype=int)
    T = actions.shape[0]
    i1 = np.broadcast_to(np.asarray(i1, dtype=int), (T,))
    states, acts, ridx, _ = simulate_grid(model_hat.P, rpmf, actions, model_hat.s1, i1, T2, rng)
    shortfall = np.maximum(i1[:, None] - ridx.sum(-1), 0) * upsilon
    if bonus is not None:
        H = actions.shape[1]
        shortfall = shortfall - bonus[np.arange(H), states, acts].sum(-1)
    return shortfall.mean(axis=1)


def _eval_stochastic(model_hat, rewards_disc, bonus, policy: AugmentedPolicy, i1: int, T2: int, rng):
    rpmf = rewards_disc.grid_pmf(policy.upsilon)
    H = model_hat.horizon
    cdf_p = np.cumsum(model_hat.P, axis=-1)
    cdf_r = np.cumsum(rpmf, axis=-1)
    cdf_a = np.cumsum(policy.probs, axis=-1)
    s = np.full(T2, model_hat.s1)
    i = np.full(T2, i1)
    spent = np.zeros(T2, dtype=int)
    total_bonus = np.zeros(T2)
    for h in range(H):
        a = sample_categorical(cdf_a[h, s, i], rng.random(T2))
        k = sample_categorical(cdf_r[h, s, a], rng.random(T2))
        if bonus is not None:
            total_bonus += bonus[h, s, a]
        s = sample_categorical(cdf_p[h, s, a], rng.random(T2))
        spent += k
        i = np.maximum(i - k, 0)
    return float(np.mean(np.maximum(i1 - spent, 0) * policy.upsilon - total_bonus))


def cvar_lsvi(model_hat: LowRankModel, rewards_disc: RewardModel, bonus: np.ndarray | None, i1: int,
              config: LsviConfig, rng: np.random.Generator, track_weights: bool = False) -> LsviResult:
    """Approximate min_pi V_1(s1, i1 * upsilon) in the learned model (no env samples)."""
    return cvar_lsvi_many(model_hat, rewards_disc, bonus, [i1], config, rng, track_weights)[0]


def cvar_lsvi_many(model_hat: LowRankModel, rewards_disc: RewardModel, bonus: np.ndarray | None, i1s,
                   config: LsviConfig, rng: np.random.Generator, track_weights: bool = False) -> list[LsviResult]:
    """Independent CVaR-LSVI runs for several start budgets, advanced in lockstep."""
    grid = config.grid
    H, S, A = model_hat.horizon, model_hat.num_states, model_hat.num_actions
    SA, I = S * A, grid.size
    i1s = np.asarray(list(i1s), dtype=int)
    if np.any(i1s < 0) or np.any(i1s >= I):
        raise ConfigInvalid("start budget index outside the grid")
    B = i1s.size
    rpmf = rewards_disc.grid_pmf(grid.upsilon)
    G = rpmf.shape[-1]
    feats = tensor_features(model_hat.phi, rpmf).reshape(H, SA, -1)  # Phi_bar per step
    D = feats.shape[-1]
    bon = np.zeros((H, SA)) if bonus is None else np.asarray(bonus, dtype=float).reshape(H, SA)
    lam, beta, T1 = config.lam, config.beta, config.T1

    M = np.broadcast_to(feats @ np.swapaxes(feats, 1, 2) / lam, (B, H, SA, SA)).copy()
    counts = np.zeros((B, H, SA, G, S))
    shift_idx = np.maximum(np.arange(I)[None, :] - np.arange(G)[:, None], 0)  # (G, I)
    terminal = np.broadcast_to(grid.values, (B, S, I))
    b_idx = np.arange(B)

    policies = np.empty((T1, B, H, S, I), dtype=np.int16)
    optimistic = np.empty((T1, B))
    buffer = np.empty((T1, B, H, 4), dtype=np.int64)
    weight_ratio = np.zeros(B)
    last_w = np.zeros((B, H, D, I)) if track_weights else None
    last_gram = np.zeros((B, H, D, D)) if track_weights else None

    for t in range(T1):
        V_next = terminal
        for h in range(H - 1, -1, -1):
            # agg[b, sa, i] = sum_j 1{sa_j = sa} V_next(s'_j, i - k_j)
            shifted = V_next[:, :, shift_idx].transpose(0, 2, 1, 3).reshape(B, G * S, I)
            agg = counts[:, h].reshape(B, SA, G * S) @ shifted
            mean = M[:, h] @ agg
            width = beta * np.sqrt(np.maximum(np.diagonal(M[:, h], axis1=1, axis2=2), 0.0))
            Q = np.clip(-bon[h][None, :, None] + mean - width[:, :, None], -H, H).reshape(B, S, A, I)
            policies[t, :, h] = np.argmin(Q, axis=2)
            V_next = Q.min(axis=2)
            if track_weights:
                gram_h = _gram(feats[h], counts[:, h], lam)
                w = np.linalg.solve(gram_h, feats[h].T @ agg)
                last_w[:, h] = w
                last_gram[:, h] = gram_h
                if t > 0:
                    bound = H * math.sqrt(t * D / lam)
                    weight_ratio = np.maximum(weight_ratio, np.linalg.norm(w, axis=1).max(-1) / bound)
        optimistic[t] = V_next[b_idx, model_hat.s1, i1s]

        states, acts, ridx, s_final = simulate_grid(model_hat.P, rpmf, policies[t], model_hat.s1, i1s, 1, rng)
        states, acts, ridx = states[:, 0], acts[:, 0], ridx[:, 0]
        nexts = np.concatenate([states[:, 1:], s_final], axis=1)  # (B, H)
        buffer[t] = np.stack([states, acts, ridx, nexts], axis=-1)
        for h in range(H):
            sa = states[:, h] * A + acts[:, h]
            counts[b_idx, h, sa, ridx[:, h], nexts[:, h]] += 1.0
            if (t + 1) % REFRESH == 0:
                gram_inv = _batched_inv(_gram(feats[h], counts[:, h], lam))
                M[:, h] = feats[h] @ gram_inv @ feats[h].T
            else:
                # Sherman-Morrison with x = phi_bar(sa): Phi_bar Lambda^-1 x is column sa of M
                col = M[b_idx, h, :, sa]                                 # (B, SA)
                denom = 1.0 + M[b_idx, h, sa, sa]
                M[:, h] -= col[:, :, None] * col[:, None, :] / denom[:, None, None]

    results = []
    for b in range(B):
        est = policy_eval_mc(model_hat, rewards_disc, bonus, policies[:, b], i1s[b],
                             config.T2, rng, grid.upsilon)
        best_t = int(np.argmin(est))
        pol = AugmentedPolicy.deterministic(policies[best_t, b].astype(np.int64), A, grid.upsilon)
        weights = None
        if track_weights:
            weights = LsviWeights(last_gram[b].copy(), last_w[b].copy(), buffer[:, b].copy())
        results.append(LsviResult(float(est[best_t]), pol, best_t, est, optimistic[:, b].copy(), int(i1s[b]),
                                  float(weight_ratio[b]) if track_weights else float("nan"), weights))
    return results
