"""Low-rank episodic MDPs, discrete reward models and augmented-budget rollouts.

Conventions: steps are 0-based (``h = 0..H-1``), states and actions are
integer ids, and budgets are looked up on a :class:`BudgetGrid` by integer
index. The start state ``s1`` is fixed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, InvalidModel
from .risk_math import SNAP, BudgetGrid, discretize_index

NEG_TOL = 1e-12
SUM_TOL = 1e-9


def _inner_product_kernel(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """P[h, s, a, s'] = <psi[h, s'], phi[h, s, a]>, validated then clamped."""
    P = np.einsum("hsad,htd->hsat", phi, psi)
    if np.any(P < -NEG_TOL):
        raise InvalidModel(f"negative transition mass {P.min():.3e}")
    P = np.maximum(P, 0.0)
    totals = P.sum(axis=-1, keepdims=True)
    if np.any(np.abs(totals - 1.0) >= SUM_TOL):
        raise InvalidModel("transition rows do not sum to 1")
    return P / totals


@dataclass(frozen=True, eq=False)
class LowRankModel:
    """Transition kernel factored as <psi_h(s'), phi_h(s, a)>.

    phi has shape (H, S, A, d) and psi has shape (H, S, d).
    """

    phi: np.ndarray
    psi: np.ndarray
    s1: int = 0
    P: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        if phi.ndim != 4 or psi.ndim != 3:
            raise InvalidModel("phi must be (H, S, A, d) and psi (H, S, d)")
        if phi.shape[0] != psi.shape[0] or phi.shape[1] != psi.shape[1] or phi.shape[3] != psi.shape[2]:
            raise InvalidModel(f"incompatible shapes phi{phi.shape} psi{psi.shape}")
        if np.any(np.linalg.norm(phi, axis=-1) > 1.0 + 1e-12):
            raise InvalidModel("feature norm exceeds 1")
        if not 0 <= self.s1 < phi.shape[1]:
            raise InvalidModel("start state out of range")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "P", _inner_product_kernel(phi, psi))

    @property
    def horizon(self) -> int:
        return self.phi.shape[0]

    @property
    def num_states(self) -> int:
        return self.phi.shape[1]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[2]

    @property
    def rank(self) -> int:
        return self.phi.shape[3]

    @classmethod
    def from_tabular(cls, P, s1: int = 0) -> "LowRankModel":
        """One-hot factorization of a tabular kernel P[h, s, a, s'] (d = S * A)."""
        P = np.asarray(P, dtype=float)
        H, S, A, _ = P.shape
        d = S * A
        phi = np.zeros((H, S, A, d))
        phi.reshape(H, d, d)[:, np.arange(d), np.arange(d)] = 1.0
        psi = np.transpose(P.reshape(H, d, S), (0, 2, 1)).copy()
        return cls(phi, psi, s1)

    def psi_bound_violation(self, rng: np.random.Generator, n_tests: int = 64) -> float:
        """Largest ||sum_s psi_h(s) g(s)||_2 - sqrt(d) over random g: S -> [0, 1].

        Vertices of [0, 1]^S are always included when S is small since the
        norm is convex in g.
        """
        H, S, d = self.psi.shape
        gs = [rng.random((n_tests, S))]
        if S <= 12:
            gs.append(((np.arange(2**S)[:, None] >> np.arange(S)) & 1).astype(float))
        g = np.concatenate(gs)
        norms = np.linalg.norm(np.einsum("ns,hsd->hnd", g, self.psi), axis=-1)
        return float(norms.max() - np.sqrt(d))


def transition_dist(model: LowRankModel, h: int, s: int, a: int) -> np.ndarray:
    """Next-state distribution at step h computed from the factors."""
    p = model.psi[h] @ model.phi[h, s, a]
    if np.any(p < -NEG_TOL):
        raise InvalidModel(f"negative transition mass {p.min():.3e}")
    p = np.maximum(p, 0.0)
    total = p.sum()
    if abs(total - 1.0) >= SUM_TOL:
        raise InvalidModel(f"transition row sums to {total!r}")
    return p / total


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Finite-support reward distributions r_h(. | s, a).

    ``values`` and ``pmf`` both have shape (H, S, A, n). For an on-grid model
    the last axis is the reward grid i * upsilon, i = 0..ceil(1 / upsilon),
    and the pmf vector is exactly the reward feature used by CVaR-LSVI.
    ``upsilon`` is None for models with arbitrary (off-grid) support.
    """

    values: np.ndarray
    pmf: np.ndarray
    upsilon: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        pmf = np.asarray(self.pmf, dtype=float)
        values = np.broadcast_to(values, pmf.shape)
        if pmf.ndim != 4:
            raise ValueError("pmf must be (H, S, A, n)")
        if np.any(pmf < -NEG_TOL) or np.any(np.abs(pmf.sum(-1) - 1.0) > SUM_TOL):
            raise ValueError("reward pmf rows must be probability vectors")
        live = pmf > 0
        if np.any(values[live] < -SNAP) or np.any(values[live] > 1.0 + SNAP):
            raise ValueError("reward support must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pmf", np.maximum(pmf, 0.0))

    @classmethod
    def on_grid(cls, pmf, upsilon: float) -> "RewardModel":
        pmf = np.asarray(pmf, dtype=float)
        n = pmf.shape[-1]
        if n != BudgetGrid(upsilon, 1).reward_size:
            raise GridMismatch(f"pmf has {n} entries, grid for upsilon={upsilon} needs {BudgetGrid(upsilon, 1).reward_size}")
        return cls(np.arange(n) * upsilon, pmf, upsilon)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pmf.shape[:3]

    def mean(self) -> np.ndarray:
        return (self.values * self.pmf).sum(-1)

    def grid_pmf(self, upsilon: float) -> np.ndarray:
        """Pmf re-expressed over the reward grid for ``upsilon``.

        Raises GridMismatch if any reward with positive mass is off-grid.
        """
        G = BudgetGrid(upsilon, 1).reward_size
        if self.upsilon is not None and abs(self.upsilon - upsilon) < 1e-15 and self.pmf.shape[-1] == G:
            return self.pmf
        idx = np.rint(self.values / upsilon).astype(int)
        live = self.pmf > 0
        off = np.abs(idx * upsilon - self.values) > SNAP
        if np.any(off & live) or np.any((idx >= G)[live]):
            raise GridMismatch(f"reward support is not on the upsilon={upsilon} grid")
        out = np.zeros(self.shape + (G,))
        H, S, A = self.shape
        hh, ss, aa, kk = np.nonzero(live)
        np.add.at(out, (hh, ss, aa, idx[hh, ss, aa, kk]), self.pmf[hh, ss, aa, kk])
        return out


def discretize_rewards(rewards: RewardModel, upsilon: float) -> RewardModel:
    """Push each reward distribution through U(r) = ceil(r / upsilon) * upsilon."""
    G = BudgetGrid(upsilon, 1).reward_size
    out = np.zeros(rewards.shape + (G,))
    idx = np.vectorize(lambda r: discretize_index(r, upsilon), otypes=[int])(rewards.values)
    live = rewards.pmf > 0
    hh, ss, aa, kk = np.nonzero(live)
    np.add.at(out, (hh, ss, aa, idx[hh, ss, aa, kk]), rewards.pmf[hh, ss, aa, kk])
    return RewardModel.on_grid(out, upsilon)


@dataclass(frozen=True, eq=False)
class AugmentedPolicy:
    """Action distributions probs[h, s, i, a] on (state, budget-grid index)."""

    probs: np.ndarray
    upsilon: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 4:
            raise ValueError("policy table must be (H, S, I, A)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(-1) - 1.0) > SUM_TOL):
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, H: int, S: int, grid: BudgetGrid, A: int) -> "AugmentedPolicy":
        return cls(np.full((H, S, grid.size, A), 1.0 / A), grid.upsilon)

    @classmethod
    def deterministic(cls, actions, A: int, upsilon: float) -> "AugmentedPolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(A)[actions], upsilon)

    @property
    def grid_size(self) -> int:
        return self.probs.shape[2]

    # budget tracking: the raw residual budget c_h = c1 - sum of past rewards
    def initial_state(self, c1: float) -> float:
        return float(c1)

    def next_state(self, c: float, r: float) -> float:
        return c - r

    def index_of_state(self, c: float) -> int:
        i = int(np.floor(c / self.upsilon + 0.5 + SNAP))
        return min(max(i, 0), self.grid_size - 1)

    def query_index(self, c1: float, past_rewards) -> int:
        """Grid index for the raw residual budget c1 - sum(past rewards)."""
        q = self.initial_state(c1)
        for r in past_rewards:
            q = self.next_state(q, r)
        return self.index_of_state(q)

    def action_dist(self, h: int, s: int, c1: float, past_rewards) -> np.ndarray:
        return self.probs[h, s, self.query_index(c1, past_rewards)]


@dataclass(frozen=True, eq=False)
class DiscretizedPolicyWrapper:
    """Grid policy played on raw rewards.

    Tracks the discretized cumulative reward sum U(r_t) and queries the grid
    policy at the index of c1 - sum U(r_t).
    """

    policy: AugmentedPolicy
    c1: float

    @property
    def probs(self) -> np.ndarray:
        return self.policy.probs

    @property
    def upsilon(self) -> float:
        return self.policy.upsilon

    # budget tracking: the grid index of c1 - sum U(r_t), clamped at 0
    def initial_state(self, c1: float) -> int:
        return self.policy.index_of_state(c1)

    def next_state(self, i: int, r: float) -> int:
        return max(i - discretize_index(r, self.upsilon), 0)

    def index_of_state(self, i: int) -> int:
        return i

    def query_index(self, c1: float, past_rewards) -> int:
        q = self.initial_state(c1)
        for r in past_rewards:
            q = self.next_state(q, r)
        return q

    def action_dist(self, h: int, s: int, c1: float, past_rewards) -> np.ndarray:
        return self.probs[h, s, self.query_index(c1, past_rewards)]


def wrap_discretized_policy(policy: AugmentedPolicy, c1: float) -> DiscretizedPolicyWrapper:
    return DiscretizedPolicyWrapper(policy, c1)


@dataclass(frozen=True)
class Step:
    s: int
    c: float
    a: int
    r: float
    s_next: int


@dataclass(frozen=True)
class Trajectory:
    c1: float
    steps: tuple[Step, ...]

    @property
    def total_reward(self) -> float:
        return float(sum(st.r for st in self.steps))


def _sample(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), p.size - 1)


def rollout_augmented(model: LowRankModel, rewards: RewardModel, policy, c1: float,
                      rng: np.random.Generator) -> Trajectory:
    """Roll out an augmented (or wrapped) policy for H steps from (s1, c1)."""
    s, c = model.s1, float(c1)
    past: list[float] = []
    steps = []
    for h in range(model.horizon):
        a = _sample(policy.action_dist(h, s, c1, past), rng)
        k = _sample(rewards.pmf[h, s, a], rng)
        r = float(rewards.values[h, s, a, k])
        s_next = _sample(transition_dist(model, h, s, a), rng)
        steps.append(Step(s, c, a, r, s_next))
        past.append(r)
        c = c - r
        s = s_next
    return Trajectory(float(c1), tuple(steps))


def sample_categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF sampling; cdf rows along the last axis."""
    return np.minimum((u[..., None] >= cdf).sum(-1), cdf.shape[-1] - 1)


class _RowSampler:
    """Inverse-CDF sampling from many categorical rows without gathering them.

    Row j's CDF is shifted by j and all rows are flattened into one sorted
    array, so a draw from row j is a single searchsorted of j + u.
    """

    def __init__(self, pmf: np.ndarray):
        self.width = pmf.shape[-1]
        cdf = np.cumsum(pmf.reshape(-1, self.width), axis=-1)
        self.flat = (cdf + np.arange(cdf.shape[0])[:, None]).ravel()

    def draw(self, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.flat, rows + u, side="right") - rows * self.width
        return np.clip(idx, 0, self.width - 1)


def simulate_grid(P: np.ndarray, reward_pmf: np.ndarray, actions: np.ndarray, s1: int,
                  i1, n: int, rng: np.random.Generator):
    """Simulate n episodes for each deterministic grid policy in ``actions``.

    ``actions`` has shape (T, H, S, I) and ``i1`` is a start index (scalar or
    one per policy). Rewards are on-grid with pmf (H, S, A, G). Returns
    (states, acts, reward_idx) each of shape (T, n, H) plus final states (T, n).
    """
    T, H, S, I = actions.shape
    A = P.shape[2]
    trans = _RowSampler(P)
    rew = _RowSampler(reward_pmf)
    s = np.full((T, n), s1, dtype=np.int64)
    i = np.broadcast_to(np.asarray(i1, dtype=np.int64).reshape(-1, 1), (T, n)).copy()
    flat_actions = actions.reshape(T, -1)
    t_idx = np.arange(T)[:, None]
    states = np.empty((T, n, H), dtype=np.int64)
    acts = np.empty((T, n, H), dtype=np.int64)
    ridx = np.empty((T, n, H), dtype=np.int64)
    for h in range(H):
        a = flat_actions[t_idx, (h * S + s) * I + i]
        row = (h * S + s) * A + a
        k = rew.draw(row, rng.random((T, n)))
        s_next = trans.draw(row, rng.random((T, n)))
        states[:, :, h], acts[:, :, h], ridx[:, :, h] = s, a, k
        i = np.maximum(i - k, 0)
        s = s_next
    return states, acts, ridx, s


def make_tabular_lowrank(num_states: int, num_actions: int, H: int, rng: np.random.Generator,
                         dirichlet_alpha: float = 1.0, upsilon: float = 0.1,
                         reward_support: int = 3) -> tuple[LowRankModel, RewardModel]:
    """Random tabular instance in one-hot low-rank form with on-grid rewards.

    Each transition row is Dirichlet(dirichlet_alpha); each reward pmf puts
    Dirichlet(1) mass on ``reward_support`` random grid points in [0, 1].
    """
    S, A = num_states, num_actions
    P = rng.dirichlet(np.full(S, dirichlet_alpha), size=(H, S, A))
    grid = BudgetGrid(upsilon, H)
    G = grid.reward_size
    valid = np.flatnonzero(grid.reward_values <= 1.0 + SNAP)
    k = min(reward_support, valid.size)
    pmf = np.zeros((H, S, A, G))
    for h in range(H):
        for s in range(S):
            for a in range(A):
                pts = rng.choice(valid, size=k, replace=False)
                pmf[h, s, a, pts] = rng.dirichlet(np.ones(k))
    return LowRankModel.from_tabular(P), RewardModel.on_grid(pmf, upsilon)


def make_continuous_rewards(H: int, S: int, A: int, rng: np.random.Generator,
                            support: int = 3) -> RewardModel:
    """Rewards with uniformly random (off-grid) support points in [0, 1]."""
    values = rng.random((H, S, A, support))
    pmf = rng.dirichlet(np.ones(support), size=(H, S, A))
    return RewardModel(values, pmf, None)


def random_policy(H: int, S: int, grid: BudgetGrid, A: int, rng: np.random.Generator,
                  deterministic: bool = False) -> AugmentedPolicy:
    if deterministic:
        return AugmentedPolicy.deterministic(rng.integers(A, size=(H, S, grid.size)), A, grid.upsilon)
    return AugmentedPolicy(rng.dirichlet(np.ones(A), size=(H, S, grid.size)), grid.upsilon)


def instance_to_dict(model: LowRankModel, rewards: RewardModel) -> dict:
    H, S, A, d = model.phi.shape
    out = {
        "H": H, "A": A, "d": d, "states": list(range(S)), "s1": model.s1,
        "phi": model.phi.tolist(), "psi": model.psi.tolist(),
        "reward_pmf": rewards.pmf.tolist(), "upsilon": rewards.upsilon,
    }
    if rewards.upsilon is None:
        out["reward_values"] = rewards.values.tolist()
    return out


def instance_from_dict(doc: dict) -> tuple[LowRankModel, RewardModel]:
    model = LowRankModel(np.array(doc["phi"], dtype=float), np.array(doc["psi"], dtype=float),
                         int(doc.get("s1", 0)))
    if (model.horizon, model.num_actions, model.rank) != (doc["H"], doc["A"], doc["d"]):
        raise InvalidModel("header fields disagree with array shapes")
    pmf = np.array(doc["reward_pmf"], dtype=float)
    if doc.get("upsilon") is None:
        rewards = RewardModel(np.array(doc["reward_values"], dtype=float), pmf, None)
    else:
        rewards = RewardModel.on_grid(pmf, float(doc["upsilon"]))
    return model, rewards


def save_instance(path, model: LowRankModel, rewards: RewardModel) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(instance_to_dict(model, rewards), f)


def load_instance(path) -> tuple[LowRankModel, RewardModel]:
    with open(path, encoding="utf-8") as f:
        return instance_from_dict(json.load(f))
