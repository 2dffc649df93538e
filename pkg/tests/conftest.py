import numpy as np
import pytest

from cvarrl.env_core import LowRankModel, RewardModel
from cvarrl.risk_math import BudgetGrid

_REPORT: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    def emit(name: str, ok: bool, detail: str):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _REPORT.append(line)
        print(line)
    return emit


def point_rewards(values, upsilon):
    """On-grid rewards with a point mass at values[h, s, a]."""
    values = np.asarray(values, dtype=float)
    G = BudgetGrid(upsilon, 1).reward_size
    pmf = np.zeros(values.shape + (G,))
    idx = np.rint(values / upsilon).astype(int)
    np.put_along_axis(pmf, idx[..., None], 1.0, axis=-1)
    return RewardModel.on_grid(pmf, upsilon)


def two_path_instance(upsilon=0.1):
    """Deterministic H=2 MDP: action a at the start leads to state a, which pays 0.2 or 0.8."""
    P = np.zeros((2, 2, 2, 2))
    P[0, :, 0, 0] = P[0, :, 1, 1] = 1.0
    P[1, 0, :, 0] = P[1, 1, :, 1] = 1.0
    rewards = np.zeros((2, 2, 2))
    rewards[1, 0, :] = 0.2
    rewards[1, 1, :] = 0.8
    return LowRankModel.from_tabular(P), point_rewards(rewards, upsilon)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


BENCH_SEEDS = tuple(range(20))


@pytest.fixture(scope="session")
def ela_benchmark():
    """ELA on the 20-seed benchmark family at K=500; (results, per-run seconds)."""
    import time
    from cvarrl.driver import RunConfig, run_benchmark
    cfg = RunConfig(tau=0.4, K=500, upsilon=0.1, c_alpha=1.0, algo="ELA")
    out, secs = [], []
    for s in BENCH_SEEDS:
        t0 = time.perf_counter()
        out.extend(run_benchmark([s], cfg))
        secs.append(time.perf_counter() - t0)
    return out, secs
