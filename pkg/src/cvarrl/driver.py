"""ELA and ELLA outer loops, run configuration and result files.

Both loops alternate exploration (H roll-outs in the true environment),
per-step maximum-likelihood model selection, elliptical bonuses and a
planning call. ELA plans exactly over the augmented budget MDP; ELLA calls
CVaR-LSVI once per grid budget. Every iterate is scored by exact evaluation
in the true environment against a cached enumeration oracle.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .env_core import (AugmentedPolicy, LowRankModel, RewardModel, discretize_rewards, make_tabular_lowrank,
                       wrap_discretized_policy)
from .errors import ConfigInvalid, GridMismatch
from .explore import build_bonus_state, schedule_params
from .model_learn import ModelClass, TransitionDataset, collect_iteration_data, make_model_class, mle_fit
from .plan_exact import augmented_vi, cvar_of_policy, enumerate_cvar_oracle, plan_cvar
from .plan_lsvi import LsviConfig, cvar_lsvi_many, theory_params
from .risk_math import BudgetGrid, cvar_objective_from_values

CSV_COLUMNS = ("k", "c_k_index", "cvar_planned", "cvar_true_of_iterate", "regret_k", "cumulative_regret", "wall_ms")
MAX_T1 = 10**6


@dataclass
class RunConfig:
    tau: float
    K: int
    upsilon: float | None = None
    eps: float | None = None
    delta: float = 0.1
    c_alpha: float = 1.0
    c_lambda: float = 1.0
    c_beta: float = 1.0
    c_T1: float = 1.0
    c_T2: float = 1.0
    seed: int = 0
    algo: str = "ELA"
    planner: str | None = None
    # explicit CVaR-LSVI settings override the rate-based defaults
    lsvi_beta: float | None = None
    lsvi_T1: int | None = None
    lsvi_T2: int | None = None
    lsvi_lambda: float = 1.0
    # model class construction (used by the CLI and benchmark helpers)
    class_size: int = 8
    include_truth: bool = True
    mix: float = 1.0

    def __post_init__(self):
        self.algo = str(self.algo).upper()
        if self.algo not in ("ELA", "ELLA"):
            raise ConfigInvalid(f"unknown algo {self.algo!r}")
        default = "exact" if self.algo == "ELA" else "lsvi"
        if self.planner is None:
            self.planner = default
        if self.planner != default:
            raise ConfigInvalid(f"{self.algo} requires planner={default!r}")
        if not 0 < self.tau <= 1:
            raise ConfigInvalid("tau must lie in (0, 1]")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigInvalid("K must be a positive integer")
        if not 0 < self.delta < 1:
            raise ConfigInvalid("delta must lie in (0, 1)")
        if self.eps is not None and not self.eps > 0:
            raise ConfigInvalid("eps must be positive")
        if self.upsilon is None and self.eps is None:
            raise ConfigInvalid("set upsilon or eps")
        if self.upsilon is not None and not 0 < self.upsilon <= 1:
            raise ConfigInvalid("upsilon must lie in (0, 1]")
        for name in ("c_alpha", "c_lambda", "c_beta", "c_T1", "c_T2"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be nonnegative")
        if self.c_lambda == 0:
            raise ConfigInvalid("c_lambda must be positive")
        if self.lsvi_beta is not None and self.lsvi_beta < 0:
            raise ConfigInvalid("lsvi_beta must be nonnegative")
        for name in ("lsvi_T1", "lsvi_T2"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 1):
                raise ConfigInvalid(f"{name} must be a positive integer")
        if not self.lsvi_lambda > 0:
            raise ConfigInvalid("lsvi_lambda must be positive")
        if self.class_size < 1 or not 0 <= self.mix <= 1:
            raise ConfigInvalid("class_size >= 1 and mix in [0, 1] required")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")

    def precision(self, H: int) -> float:
        """upsilon, or eps * tau / (3H) when only eps is given."""
        return self.upsilon if self.upsilon is not None else self.eps * self.tau / (3 * H)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigInvalid(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"bad config JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigInvalid("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class IterationRecord:
    k: int
    c_k_index: int
    cvar_planned: float
    cvar_true_of_iterate: float
    regret_k: float
    cumulative_regret: float
    wall_ms: float

    def row(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass(eq=False)
class RunResult:
    seed: int
    algo: str
    cvar_star: float
    oracle_index: int
    upsilon: float
    tau: float
    records: list = field(default_factory=list)
    policies: list = field(default_factory=list, repr=False)   # grid policy of every iterate
    sampled_k: int | None = None
    env_samples: int = 0
    truth_in_class: bool = True
    exact_oracle: bool = True

    @property
    def K(self) -> int:
        return len(self.records)

    def _pick(self, k: int):
        rec = self.records[k - 1]
        return self.policies[k - 1], rec.c_k_index * self.upsilon, rec

    @property
    def best_k(self) -> int:
        """Iterate with the highest true CVaR (earliest on ties)."""
        vals = [r.cvar_true_of_iterate for r in self.records]
        return int(np.argmax(vals)) + 1

    @property
    def best_regret(self) -> float:
        return self.records[self.best_k - 1].regret_k

    def sampled(self):
        """(policy, budget, record) of the uniformly sampled iterate."""
        return self._pick(self.sampled_k)

    def best(self):
        return self._pick(self.best_k)

    def last(self):
        return self._pick(self.K)

    def summary(self, timing: bool = True) -> dict:
        recs = [dataclasses.asdict(r) for r in self.records]
        if not timing:
            for r in recs:
                r.pop("wall_ms")
        return {
            "seed": self.seed, "algo": self.algo, "cvar_star": self.cvar_star, "oracle_index": self.oracle_index,
            "upsilon": self.upsilon, "tau": self.tau, "env_samples": self.env_samples, "truth_in_class": self.truth_in_class,
            "exact_oracle": self.exact_oracle, "sampled_k": self.sampled_k, "best_k": self.best_k,
            "best_regret": self.best_regret, "mixture_regret": float(np.mean([r.regret_k for r in self.records])),
            "records": recs,
            "policies": {
                "sampled": self._policy_doc(self.sampled_k),
                "best": self._policy_doc(self.best_k),
                "last": self._policy_doc(self.K),
            },
        }

    def _policy_doc(self, k: int) -> dict:
        pol, c1, _ = self._pick(k)
        return {"k": k, "c1": c1, "upsilon": pol.upsilon, "probs": pol.probs.tolist()}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.summary(timing), sort_keys=True)

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as f:
            f.write(self.to_json())
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), self.records)


def write_metrics_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())


def policy_from_doc(doc: dict) -> tuple[AugmentedPolicy, float]:
    return AugmentedPolicy(np.asarray(doc["probs"], dtype=float), float(doc["upsilon"])), float(doc["c1"])


def _streams(seed: int):
    data, plan, pick = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(data), np.random.default_rng(plan), np.random.default_rng(pick)


def _planning_rewards(rewards: RewardModel, grid: BudgetGrid) -> tuple[RewardModel, bool]:
    """Rewards as seen by the planner and whether they were already on-grid."""
    try:
        return RewardModel.on_grid(rewards.grid_pmf(grid.upsilon), grid.upsilon), True
    except GridMismatch:
        return discretize_rewards(rewards, grid.upsilon), False


def _learned_model(dataset: TransitionDataset, model_class: ModelClass) -> LowRankModel:
    return model_class.assemble([mle_fit(dataset, model_class, h) for h in range(dataset.num_steps)])


def _bonus_table(dataset: TransitionDataset, model_hat: LowRankModel, k: int, cfg: RunConfig, class_size: int):
    H, A, d = model_hat.horizon, model_hat.num_actions, model_hat.rank
    alpha, lam = schedule_params(k, H, A, d, class_size, cfg.delta, cfg.c_alpha, cfg.c_lambda)
    visits = [dataset.visit_counts(h) for h in range(dataset.num_steps)]
    return build_bonus_state(visits, model_hat.phi, k, alpha, lam).table(model_hat.phi)


def _run(env: LowRankModel, rewards: RewardModel, model_class: ModelClass, cfg: RunConfig, plan, c0: float,
         sink=None) -> RunResult:
    H, S, A = env.horizon, env.num_states, env.num_actions
    grid = BudgetGrid(cfg.precision(H), H)
    rewards_plan, on_grid = _planning_rewards(rewards, grid)
    oracle = enumerate_cvar_oracle(env, rewards_plan, cfg.tau, grid)
    rng_data, rng_plan, rng_pick = _streams(cfg.seed)
    result = RunResult(int(cfg.seed), cfg.algo, oracle.cvar_star, oracle.best_index, grid.upsilon, cfg.tau,
                       truth_in_class=model_class.includes_truth, exact_oracle=on_grid)
    dataset = TransitionDataset(H, S, A)
    policy, c_prev = AugmentedPolicy.uniform(H, S, grid, A), c0
    cumulative = 0.0
    for k in range(1, cfg.K + 1):
        t0 = time.perf_counter()
        collect_iteration_data(env, rewards, wrap_discretized_policy(policy, c_prev), c_prev, dataset, rng_data)
        model_hat = _learned_model(dataset, model_class)
        bonus = _bonus_table(dataset, model_hat, k, cfg, len(model_class))
        i_k, planned, policy = plan(model_hat, rewards_plan, bonus, grid, rng_plan)
        c_prev = i_k * grid.upsilon
        true_cvar = cvar_of_policy(env, rewards, wrap_discretized_policy(policy, c_prev), c_prev, cfg.tau)
        regret = oracle.cvar_star - true_cvar
        cumulative += regret
        rec = IterationRecord(k, int(i_k), float(planned), float(true_cvar), float(regret), float(cumulative),
                              round((time.perf_counter() - t0) * 1e3, 3))
        result.records.append(rec)
        result.policies.append(policy)
        result.env_samples = dataset.rollouts
        if sink is not None:
            sink(rec)
    result.sampled_k = int(rng_pick.integers(1, cfg.K + 1))
    return result


def run_ela(env: LowRankModel, rewards: RewardModel, model_class: ModelClass, cfg: RunConfig,
            sink=None) -> RunResult:
    """Exact-planning loop; ``sink`` receives each IterationRecord as it is produced."""
    if cfg.algo != "ELA":
        raise ConfigInvalid("run_ela needs algo=ELA")

    def plan(model_hat, rewards_plan, bonus, grid, rng):
        table = augmented_vi(model_hat, rewards_plan, bonus, grid)
        return plan_cvar(table, cfg.tau, grid, model_hat.s1, model_hat.num_actions)

    # initial budget c0 = 1 is an arbitrary start, snapped to the grid
    return _run(env, rewards, model_class, cfg, plan, 1.0, sink)


def lsvi_config(cfg: RunConfig, grid: BudgetGrid, d: int) -> LsviConfig:
    """Explicit lsvi_* settings win; missing ones come from the rate formulas (needs eps)."""
    beta, T1, T2 = cfg.lsvi_beta, cfg.lsvi_T1, cfg.lsvi_T2
    if None in (beta, T1, T2):
        if cfg.eps is None:
            raise ConfigInvalid("set lsvi_beta, lsvi_T1 and lsvi_T2, or eps for the rate-based defaults")
        rb, r1, r2 = theory_params(grid.horizon, d, grid.upsilon, cfg.delta, cfg.eps, cfg.tau,
                                   cfg.c_beta, cfg.c_T1, cfg.c_T2)
        beta = rb if beta is None else beta
        T1 = r1 if T1 is None else T1
        T2 = r2 if T2 is None else T2
    if T1 > MAX_T1:
        raise ConfigInvalid(f"T1={T1} is impractically large; set lsvi_T1 explicitly")
    return LsviConfig(grid, cfg.lsvi_lambda, float(beta), int(T1), int(T2))


def run_ella(env: LowRankModel, rewards: RewardModel, model_class: ModelClass, cfg: RunConfig,
             sink=None) -> RunResult:
    """CVaR-LSVI loop; the planner simulates inside the learned model only."""
    if cfg.algo != "ELLA":
        raise ConfigInvalid("run_ella needs algo=ELLA")
    grid = BudgetGrid(cfg.precision(env.horizon), env.horizon)
    lcfg = lsvi_config(cfg, grid, model_class.candidates[0].rank)

    def plan(model_hat, rewards_plan, bonus, grid, rng):
        runs = cvar_lsvi_many(model_hat, rewards_plan, bonus, range(grid.size), lcfg, rng)
        i_k, value = cvar_objective_from_values([r.value for r in runs], cfg.tau, grid)
        return i_k, value, runs[i_k].policy

    return _run(env, rewards, model_class, cfg, plan, grid.max_index * grid.upsilon, sink)


def run(env, rewards, model_class, cfg: RunConfig, sink=None) -> RunResult:
    return (run_ela if cfg.algo == "ELA" else run_ella)(env, rewards, model_class, cfg, sink)


def benchmark_instance(seed: int, num_states: int = 3, num_actions: int = 2, H: int = 3, upsilon: float = 0.1,
                       class_size: int = 8, include_truth: bool = True, mix: float = 1.0):
    """Seeded random tabular instance plus its finite model class."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0A]))
    env, rewards = make_tabular_lowrank(num_states, num_actions, H, rng, upsilon=upsilon)
    cls = make_model_class(env, class_size, rng, mix=mix, include_truth=include_truth)
    return env, rewards, cls


def _benchmark_job(args):
    seed, cfg_doc, instance_kw = args
    cfg = RunConfig.from_dict({**cfg_doc, "seed": seed})
    H = instance_kw.get("H", 3)
    env, rewards, cls = benchmark_instance(seed, upsilon=cfg.precision(H), class_size=cfg.class_size,
                                           include_truth=cfg.include_truth, mix=cfg.mix, **instance_kw)
    return run(env, rewards, cls, cfg)


def worker_count() -> int:
    raw = os.environ.get("CVARRL_THREADS")
    if raw:
        try:
            return max(int(raw), 1)
        except ValueError as exc:
            raise ConfigInvalid(f"CVARRL_THREADS={raw!r} is not an integer") from exc
    return 1


def run_benchmark(seeds, cfg: RunConfig, workers: int | None = None, **instance_kw) -> list[RunResult]:
    """One run per seed on the benchmark family; fans out across processes."""
    workers = worker_count() if workers is None else workers
    jobs = [(int(s), cfg.to_dict(), instance_kw) for s in seeds]
    if workers <= 1 or len(jobs) <= 1:
        return [_benchmark_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_benchmark_job, jobs))
