import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridrl.objectives import (
    ObjectiveWeights, StepRecord, accommodation_ratios, evaluation_metrics, renewable_accommodation,
    reward_terms, step_reward, voltage_fluctuation,
)
from gridrl.power_flow import ConstraintReport, ConstraintViolation

W = ObjectiveWeights(1.0, 1.0, 0.01)


def report(*kinds):
    return ConstraintReport([ConstraintViolation(k, i, 0.01) for i, k in enumerate(kinds)])


def test_voltage_fluctuation_examples():
    assert voltage_fluctuation(np.ones(5)) == 0.0
    assert voltage_fluctuation(np.array([0.9, 1, 1, 1])) == pytest.approx(0.1, abs=1e-15)
    assert voltage_fluctuation(np.array([0.95, 1.05])) == pytest.approx(0.0707107, abs=1e-7)


@pytest.mark.parametrize("frac,expected", [(1.0, 10), (0.0, 0), (0.5, 5)])
def test_accommodation(frac, expected):
    p_bar = np.linspace(0.1, 1.0, 10)
    assert renewable_accommodation(frac * p_bar, p_bar) == pytest.approx(expected, abs=1e-12)


def test_accommodation_masks_unavailable():
    ratio, active = accommodation_ratios(np.array([0.0, 0.5]), np.array([0.0, 1.0]))
    assert list(active) == [False, True]
    assert list(ratio) == [0.0, 0.5]
    with pytest.raises(ValueError):
        accommodation_ratios(np.array([1.1]), np.array([1.0]))


def test_flat_voltage_first_term():
    n_load = 32
    vol, rer, gen = reward_terms(np.ones(n_load), np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0))
    assert vol == pytest.approx(math.sqrt(n_load), abs=1e-12)
    assert rer == 0.0 and gen == 0.0


def test_reward_composition():
    v = np.array([0.97, 1.02, 1.0])
    ratio = np.array([0.5, 1.0, 0.0])
    active = np.array([True, True, False])
    th = np.array([2.0])
    rc = np.array([0.1, 0.3, 0.0])
    r, term, n = step_reward(v, ratio, active, th, rc, W, report())
    expected = (math.sqrt(np.exp(-(0.03**2)) + np.exp(-(0.02**2)) + 1.0)
                + math.exp(0.5) + math.e
                + 0.01 * (math.exp(-2.0) + math.exp(-0.1) + math.exp(-0.3) + 1.0))
    assert r == pytest.approx(expected, abs=1e-12)
    assert not term and n == 0


def test_balance_infeasible_terminates():
    r, term, n = step_reward(None, np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0), W,
                             report(), balance_ok=False)
    assert r == -10.0 and term and n == 1
    r, term, _ = step_reward(None, np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0), W,
                             report("balance"))
    assert r == -10.0 and term


def test_load_voltage_violation_penalised():
    v = np.ones(3)
    base, _, _ = step_reward(v, np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0), W, report())
    r, term, n = step_reward(v, np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0), W,
                             report("load_voltage"))
    assert r == pytest.approx(base - 10.0) and not term and n == 1


def test_penalties_accumulate_only_for_penalised_kinds():
    v = np.ones(3)
    args = (v, np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0), W)
    base, _, _ = step_reward(*args, report())
    r, _, n = step_reward(*args, report("load_voltage", "gen_q", "branch_flow", "gen_voltage", "gen_p"))
    assert n == 3 and r == pytest.approx(base - 30.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["load_voltage", "gen_q", "branch_flow"]), max_size=6),
       st.lists(st.floats(0.9, 1.1), min_size=1, max_size=8))
def test_zero_weights_give_penalty_multiples(kinds, v):
    r, _, _ = step_reward(np.array(v), np.zeros(0), np.zeros(0, bool), np.zeros(1), np.zeros(1),
                          ObjectiveWeights(0, 0, 0), report(*kinds))
    assert r == -10.0 * len(kinds)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0), st.integers(0, 2**31))
def test_weight_linearity(lam, seed):
    rng = np.random.default_rng(seed)
    args = (rng.uniform(0.9, 1.1, 6), rng.uniform(0, 1, 4), rng.random(4) > 0.3,
            rng.uniform(0, 3, 2), rng.uniform(0, 1, 4))
    r1, _, _ = step_reward(*args, W, report())
    r2, _, _ = step_reward(*args, W.scaled(lam), report())
    assert r2 == pytest.approx(lam * r1, rel=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        ObjectiveWeights(-1.0, 1.0, 1.0)


def test_evaluation_metrics_examples():
    ep = [StepRecord(1.0, 0.0, 3.0, 3) for _ in range(100)]
    m = evaluation_metrics([ep])
    assert m.score == 100.0
    assert m.alpha_vol == 0.0
    assert m.alpha_rer == 100.0
    assert set(m.as_dict()) == {"SCORE", "alpha_vol", "alpha_rer"}


def test_evaluation_metrics_averaging():
    a = [StepRecord(2.0, 0.1, 1.0, 2), StepRecord(2.0, 0.3, 0.0, 0)]
    b = [StepRecord(-1.0, math.nan, 0.0, 0)]
    m = evaluation_metrics([a, b])
    assert m.score == pytest.approx(1.5)
    assert m.alpha_vol == pytest.approx(20.0)
    assert m.alpha_rer == pytest.approx(50.0)


def test_evaluation_metrics_empty():
    with pytest.raises(ValueError):
        evaluation_metrics([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 10), st.floats(0, 0.5)), min_size=1, max_size=20))
def test_alpha_ranges(rows):
    recs = [StepRecord(0.0, vol, frac * n, n) for frac, n, vol in rows]
    m = evaluation_metrics([recs])
    assert 0.0 <= m.alpha_rer <= 100.0 + 1e-9
    assert m.alpha_vol >= 0.0
