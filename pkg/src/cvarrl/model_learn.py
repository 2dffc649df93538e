"""Exploration datasets, the finite-class MLE oracle and TV diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env_core import LowRankModel, RewardModel, _sample, transition_dist
from .errors import DimensionMismatch, EmptyDataset

PROB_FLOOR = 1e-12


@dataclass
class TransitionDataset:
    """Bags D[h] and Dtilde[h] of (s, a, s') tuples for steps h = 0..H-2.

    Alongside the raw tuples, keeps count tables so likelihoods and Gram
    matrices cost O(S^2 A) instead of O(n).
    """

    horizon: int
    num_states: int
    num_actions: int
    D: list = field(init=False)
    Dtilde: list = field(init=False)
    rollouts: int = field(init=False, default=0)

    def __post_init__(self):
        n = max(self.horizon - 1, 0)
        S, A = self.num_states, self.num_actions
        self.D = [[] for _ in range(n)]
        self.Dtilde = [[] for _ in range(n)]
        self._counts = np.zeros((n, S, A, S), dtype=np.int64)
        self._d_counts = np.zeros((n, S, A), dtype=np.int64)

    @property
    def num_steps(self) -> int:
        return len(self.D)

    def add(self, bag: str, h: int, s: int, a: int, s_next: int) -> None:
        if bag == "D":
            self.D[h].append((s, a, s_next))
            self._d_counts[h, s, a] += 1
        elif bag == "Dtilde":
            self.Dtilde[h].append((s, a, s_next))
        else:
            raise ValueError(f"unknown bag {bag!r}")
        self._counts[h, s, a, s_next] += 1

    def transition_counts(self, h: int) -> np.ndarray:
        """Counts n[s, a, s'] over D[h] and Dtilde[h] combined."""
        return self._counts[h]

    def visit_counts(self, h: int) -> np.ndarray:
        """Counts n[s, a] over D[h] only (the bag the bonus is built from)."""
        return self._d_counts[h]

    def size(self, h: int) -> int:
        return len(self.D[h]) + len(self.Dtilde[h])

    def dump_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for bag, bags in (("D", self.D), ("Dtilde", self.Dtilde)):
                for h, tuples in enumerate(bags):
                    for s, a, s_next in tuples:
                        f.write(json.dumps({"h": h, "s": s, "a": a, "s_next": s_next, "bag": bag}) + "\n")

    @classmethod
    def load_jsonl(cls, path, horizon: int, num_states: int, num_actions: int) -> "TransitionDataset":
        ds = cls(horizon, num_states, num_actions)
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                ds.add(rec["bag"], rec["h"], rec["s"], rec["a"], rec["s_next"])
        return ds


@dataclass(frozen=True, eq=False)
class ModelClass:
    """Finite set of candidate factorizations sharing H, S, A and d."""

    candidates: tuple
    truth_index: int | None = None

    def __post_init__(self):
        if len(self.candidates) < 1:
            raise ValueError("model class needs at least one candidate")
        shape = self.candidates[0].phi.shape
        if any(c.phi.shape != shape for c in self.candidates):
            raise ValueError("candidates must share (H, S, A, d)")
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "_kernels", np.stack([c.P for c in self.candidates]))

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def includes_truth(self) -> bool:
        return self.truth_index is not None

    def assemble(self, picks) -> LowRankModel:
        """Learned model taking step h's factors from candidate picks[h]."""
        H = self.candidates[0].horizon
        picks = list(picks) + [0] * (H - len(picks))
        phi = np.stack([self.candidates[picks[h]].phi[h] for h in range(H)])
        psi = np.stack([self.candidates[picks[h]].psi[h] for h in range(H)])
        return LowRankModel(phi, psi, self.candidates[0].s1)


def make_model_class(truth: LowRankModel, size: int, rng: np.random.Generator, mix: float = 1.0,
                     include_truth: bool = True, dirichlet_alpha: float = 1.0) -> ModelClass:
    """{truth} plus perturbed copies, re-factorized through one-hot features.

    A perturbed kernel is (1 - mix) * P_true + mix * Dirichlet draw, so
    ``mix=1`` gives fully resampled, well-separated candidates. The truth
    sits at a random position so tie-breaking does not favour it.
    """
    H, S, A, _ = truth.P.shape
    n_fake = size - 1 if include_truth else size
    cands = []
    for _ in range(n_fake):
        noise = rng.dirichlet(np.full(S, dirichlet_alpha), size=(H, S, A))
        cands.append(LowRankModel.from_tabular((1 - mix) * truth.P + mix * noise, truth.s1))
    truth_index = None
    if include_truth:
        truth_index = int(rng.integers(size))
        cands.insert(truth_index, LowRankModel.from_tabular(truth.P, truth.s1))
    return ModelClass(tuple(cands), truth_index)


def collect_iteration_data(env: LowRankModel, rewards: RewardModel, policy, c_prev: float,
                           dataset: TransitionDataset, rng: np.random.Generator) -> TransitionDataset:
    """One iteration of exploratory data collection (H roll-outs).

    ``policy`` is queried through ``action_dist(h, s, c1, past_rewards)``,
    so a DiscretizedPolicyWrapper plays the grid policy on raw rewards.
    """
    H, A, s1 = env.horizon, env.num_actions, env.s1
    if H >= 2:
        a = int(rng.integers(A))
        dataset.add("Dtilde", 0, s1, a, _sample(transition_dist(env, 0, s1, a), rng))
    for h in range(H - 1):
        s, past = s1, []
        for t in range(h):
            a = _sample(policy.action_dist(t, s, c_prev, past), rng)
            k = _sample(rewards.pmf[t, s, a], rng)
            past.append(float(rewards.values[t, s, a, k]))
            s = _sample(transition_dist(env, t, s, a), rng)
        a = int(rng.integers(A))
        s_tilde = _sample(transition_dist(env, h, s, a), rng)
        dataset.add("D", h, s, a, s_tilde)
        if h <= H - 3:
            a2 = int(rng.integers(A))
            dataset.add("Dtilde", h + 1, s_tilde, a2, _sample(transition_dist(env, h + 1, s_tilde, a2), rng))
    dataset.rollouts += H
    return dataset


def log_likelihoods(dataset: TransitionDataset, model_class: ModelClass, h: int) -> np.ndarray:
    """Log-likelihood of D[h] + Dtilde[h] under every candidate."""
    counts = dataset.transition_counts(h)
    logp = np.log(np.maximum(model_class._kernels[:, h], PROB_FLOOR))
    return np.einsum("sat,csat->c", counts, logp)


def mle_fit(dataset: TransitionDataset, model_class: ModelClass, h: int) -> int:
    """Index of the maximum-likelihood candidate for step h (smallest on ties)."""
    if dataset.size(h) == 0:
        raise EmptyDataset(f"no transitions recorded for step {h}")
    return int(np.argmax(log_likelihoods(dataset, model_class, h)))


def model_tv_error(p, q) -> float:
    """L1 distance sum |p - q| (range [0, 2])."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatch(f"{p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())
