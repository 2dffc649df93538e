import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvarrl.errors import EmptySamples, InvalidTau
from cvarrl.risk_math import (BudgetGrid, ReturnDistribution, cvar_of_distribution, cvar_objective_from_values,
                              discretize_reward, empirical_cvar, value_at_risk)


def tail_mean(support, probs, tau):
    """Lower-tail average: integrate the quantile function over [0, tau]."""
    order = np.argsort(support)
    acc = mass = 0.0
    for x, p in zip(np.asarray(support)[order], np.asarray(probs)[order]):
        take = min(p, tau - mass)
        if take <= 0:
            break
        acc += take * x
        mass += take
    return acc / tau


@st.composite
def distributions(draw, max_size=6, hi=3.0):
    n = draw(st.integers(1, max_size))
    support = draw(st.lists(st.floats(0, hi, allow_nan=False), min_size=n, max_size=n, unique=True))
    w = np.array(draw(st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n)))
    return ReturnDistribution(np.array(support), w / w.sum())


taus = st.floats(0.01, 1.0)


class TestCvar:
    def test_tau_one_is_mean(self):
        d = ReturnDistribution(np.array([0.1, 0.7, 2.2]), np.array([0.2, 0.5, 0.3]))
        assert cvar_of_distribution(d, 1.0) == pytest.approx(d.mean, abs=1e-12)

    @pytest.mark.parametrize("tau", [0.05, 0.3, 1.0])
    def test_point_mass(self, tau):
        assert cvar_of_distribution(ReturnDistribution(np.array([1.7]), np.array([1.0])), tau) == pytest.approx(1.7)

    def test_fair_coin_half(self):
        d = ReturnDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        assert cvar_of_distribution(d, 0.5) == pytest.approx(0.0, abs=1e-15)

    def test_invalid_tau(self):
        d = ReturnDistribution(np.array([1.0]), np.array([1.0]))
        for tau in (0.0, -0.1, 1.5):
            with pytest.raises(InvalidTau):
                cvar_of_distribution(d, tau)

    def test_var_smallest_on_ties(self):
        # with tau = 0.5 the objective is flat on [0, 1]
        d = ReturnDistribution(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert value_at_risk(d, 0.5)[0] == 0.0

    @given(distributions(), taus)
    def test_matches_tail_mean(self, d, tau):
        assert cvar_of_distribution(d, tau) == pytest.approx(tail_mean(d.support, d.probs, tau), abs=1e-9)

    @given(distributions(), taus)
    def test_below_mean(self, d, tau):
        assert cvar_of_distribution(d, tau) <= d.mean + 1e-12

    @given(distributions(), taus, taus)
    def test_monotone_in_tau(self, d, t1, t2):
        lo, hi = sorted((t1, t2))
        assert cvar_of_distribution(d, lo) <= cvar_of_distribution(d, hi) + 1e-12

    @given(distributions(hi=2.0), taus, st.floats(0.0, 1.0))
    def test_translation(self, d, tau, a):
        assert cvar_of_distribution(d.shifted(a), tau) == pytest.approx(cvar_of_distribution(d, tau) + a, abs=1e-9)

    def test_from_pairs_merges(self):
        d = ReturnDistribution.from_pairs([(0.3, 0.25), (0.1 + 0.2, 0.25), (1.0, 0.5)])
        assert d.support.size == 2 and d.probs[0] == pytest.approx(0.5)

    def test_rejects_bad_probs(self):
        with pytest.raises(ValueError):
            ReturnDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
        with pytest.raises(ValueError):
            ReturnDistribution(np.array([1.0, 1.0]), np.array([0.5, 0.5]))


class TestEmpiricalCvar:
    def test_constant(self):
        assert empirical_cvar([0.4] * 9, 0.3) == pytest.approx(0.4)

    def test_tau_one(self):
        x = [0.1, 0.9, 0.4, 2.0]
        assert empirical_cvar(x, 1.0) == pytest.approx(np.mean(x))

    def test_two_samples(self):
        assert empirical_cvar([0.0, 1.0], 0.5) == 0.0

    def test_empty(self):
        with pytest.raises(EmptySamples):
            empirical_cvar([], 0.5)

    @settings(max_examples=50)
    @given(distributions(max_size=4), taus, st.integers(50, 400))
    def test_replicated_pmf(self, d, tau, n):
        # expand the pmf into n samples by largest-remainder rounding
        raw = d.probs * n
        counts = np.floor(raw).astype(int)
        counts[np.argsort(raw - counts)[::-1][: n - counts.sum()]] += 1
        samples = np.repeat(d.support, counts)
        expanded = ReturnDistribution(d.support[counts > 0], counts[counts > 0] / n)
        H = 3.0
        assert abs(empirical_cvar(samples, tau) - cvar_of_distribution(expanded, tau)) <= H / n + 1e-12


class TestDiscretize:
    @pytest.mark.parametrize("r,expected", [(0.0, 0.0), (0.3, 0.3), (0.23, 0.3), (1.0, 1.0)])
    def test_examples(self, r, expected):
        assert discretize_reward(r, BudgetGrid(0.1, 1)) == pytest.approx(expected)

    @given(st.floats(0, 1), st.sampled_from([0.05, 0.1, 0.25, 0.3]))
    def test_round_up_within_one_cell(self, r, ups):
        u = discretize_reward(r, BudgetGrid(ups, 1))
        assert -1e-9 <= u - r < ups


class TestGridObjective:
    def test_zero_values(self):
        g = BudgetGrid(0.1, 3)
        i, v = cvar_objective_from_values(np.zeros(g.size), 0.4, g)
        assert i == g.max_index and v == pytest.approx(g.max_index * 0.1)

    def test_hinge(self):
        g = BudgetGrid(0.1, 1)
        v1 = np.maximum(g.values - 0.5, 0.0)
        i, v = cvar_objective_from_values(v1, 0.5, g)
        assert i == 5 and v == pytest.approx(0.5)

    def test_tie_smallest(self):
        g = BudgetGrid(0.5, 1)
        # objective i*0.5 - v/1 = [0, 0, 0]
        assert cvar_objective_from_values(g.values, 1.0, g)[0] == 0

    def test_grid_invariants(self):
        for ups, H in [(0.1, 3), (0.3, 2), (0.25, 1), (0.07, 4)]:
            g = BudgetGrid(ups, H)
            assert g.values[0] == 0 and np.all(np.diff(g.values) > 0)
            assert g.values[-1] >= H - 1e-9
            assert g.max_index == math.ceil(H / ups - 1e-9)
