"""End-to-end acceptance criteria A1-A9; each prints one PASS/FAIL line."""
import time

import numpy as np
import pytest

from cvarrl.driver import RunConfig, benchmark_instance, run_benchmark
from cvarrl.plan_exact import augmented_vi, enumerate_cvar_oracle, plan_cvar
from cvarrl.plan_lsvi import LsviConfig, cvar_lsvi
from cvarrl.properties import check_eigen_lemma, check_elliptical_potential, run_suite
from cvarrl.risk_math import BudgetGrid, ReturnDistribution, cvar_of_distribution, empirical_cvar
from cvarrl.env_core import make_tabular_lowrank

from conftest import BENCH_SEEDS

pytestmark = pytest.mark.acceptance

TUNED_BETA, T1, T2 = 1.0, 200, 400


def test_a1_ela_end_to_end(ela_benchmark, report):
    results, secs = ela_benchmark
    good = sum(r.best_regret <= 0.10 for r in results)
    ok = good >= 18 and max(secs) <= 120 and all(r.K == 500 and r.truth_in_class for r in results)
    report("A1", ok, f"best regret <= 0.10 on {good}/20 seeds, slowest run {max(secs):.1f}s")
    assert ok


def test_a2_ella_end_to_end(report):
    K = 10
    cfg = RunConfig(tau=0.4, K=K, upsilon=0.1, algo="ELLA", lsvi_beta=TUNED_BETA, lsvi_T1=T1, lsvi_T2=T2)
    results = run_benchmark(BENCH_SEEDS, cfg)
    good = sum(r.best_regret <= 0.15 for r in results)
    samples_ok = all(r.env_samples == K * 3 for r in results)
    ok = good >= 16 and samples_ok
    report("A2", ok, f"best regret <= 0.15 on {good}/20 seeds at K={K}, env samples = K*H: {samples_ok}")
    assert ok


def test_a3_sandwich(report):
    res = run_suite("sandwich", 50, seed=3)
    n = sum(r.ok for r in res)
    report("A3", n == 50, f"{n}/50 cases, worst gap/bound {max(r.lhs / r.rhs for r in res):.3f}")
    assert n == 50


def test_a4_simulation_lemmas(report):
    rs = sum(r.ok for r in run_suite("sim-risk-sensitive", 100, seed=4))
    rn = sum(r.ok for r in run_suite("sim-risk-neutral", 100, seed=4))
    report("A4", rs == rn == 100, f"risk-sensitive {rs}/100, risk-neutral {rn}/100")
    assert rs == rn == 100


def test_a5_linear_algebra(report):
    rng = np.random.default_rng(5)
    counts = {}
    for d in (2, 8):
        counts[d] = (sum(check_eigen_lemma(rng, d=d).ok for _ in range(100)),
                     sum(check_elliptical_potential(rng, d=d).ok for _ in range(100)))
    ok = all(c == (100, 100) for c in counts.values())
    report("A5", ok, "; ".join(f"d={d}: eigen {e}/100, potential {p}/100" for d, (e, p) in counts.items()))
    assert ok


def test_a6_planner_equivalence(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        S, A, H = (int(x) for x in rng.integers(1, 4, size=3))
        ups = float(rng.choice([0.1, 0.25, 0.5]))
        tau = float(rng.uniform(0.05, 1.0))
        m, r = make_tabular_lowrank(S, A, H, rng, upsilon=ups)
        grid = BudgetGrid(ups, H)
        _, v, _ = plan_cvar(augmented_vi(m, r, None, grid), tau, grid, m.s1, A)
        worst = max(worst, abs(v - enumerate_cvar_oracle(m, r, tau, grid).cvar_star))
    close = 0
    for seed in range(100):
        env, rewards, _ = benchmark_instance(seed)
        grid = BudgetGrid(0.1, 3)
        i1 = int(np.random.default_rng(seed).integers(grid.size))
        v_star = augmented_vi(env, rewards, None, grid).V[0, env.s1, i1]
        res = cvar_lsvi(env, rewards, None, i1, LsviConfig(grid, beta=TUNED_BETA, T1=T1, T2=T2),
                        np.random.default_rng([seed, 6]))
        close += abs(res.value - v_star) <= 0.15
    ok = worst <= 1e-9 and close >= 95
    report("A6", ok, f"oracle max diff {worst:.2e} over 100; LSVI within 0.15 on {close}/100")
    assert ok


def test_a7_cvar_functional(report):
    rng = np.random.default_rng(7)
    mean_err, mono, conv = 0.0, True, 0
    taus = np.linspace(0.05, 1.0, 20)
    for _ in range(20):
        d = ReturnDistribution(np.sort(rng.choice(np.arange(31) * 0.1, 3, replace=False)), rng.dirichlet(np.ones(3)))
        mean_err = max(mean_err, abs(cvar_of_distribution(d, 1.0) - d.mean))
        vals = [cvar_of_distribution(d, t) for t in taus]
        mono &= bool(np.all(np.diff(vals) >= -1e-12))
        tau = float(rng.uniform(0.05, 1.0))
        x = rng.choice(d.support, size=100_000, p=d.probs)
        conv += abs(empirical_cvar(x, tau) - cvar_of_distribution(d, tau)) <= 0.02
    ok = mean_err <= 1e-12 and mono and conv == 20
    report("A7", ok, f"|CVaR_1 - mean| {mean_err:.1e}, monotone {mono}, empirical within 0.02 on {conv}/20")
    assert ok


def test_a8_mle(report):
    res = run_suite("mle", 100, seed=8)
    n = sum(r.ok for r in res)
    report("A8", n >= 95, f"{n}/100 trials within bound, worst err/bound {max(r.lhs / r.rhs for r in res):.2e}")
    assert n >= 95


def test_a9_lsvi_optimism(report):
    hits = 0
    for seed in range(100):
        env, rewards, _ = benchmark_instance(seed)
        rng = np.random.default_rng([seed, 9])
        grid = BudgetGrid(0.1, 3)
        bonus = np.zeros((3, 3, 2))
        bonus[0] = rng.uniform(0, 2, size=(3, 2))
        i1 = int(rng.integers(grid.size))
        v_star = augmented_vi(env, rewards, bonus, grid).V[0, env.s1, i1]
        res = cvar_lsvi(env, rewards, bonus, i1, LsviConfig(grid, beta=TUNED_BETA, T1=T1, T2=T2), rng)
        hits += bool(np.all(res.optimistic <= v_star + 1e-6))
    report("A9", hits >= 95, f"optimistic at every iterate in {hits}/100 runs")
    assert hits >= 95
