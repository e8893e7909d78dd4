from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compplan.mdp import ModelError, ssp_from_sets
from compplan.options import (
    CompositionSpec,
    compose,
    direct_option,
    exclusion_q,
    gcd_value,
    load_options,
    make_primitive_option,
    option_selection,
    save_options,
)
from compplan.solver import evaluate_on_task

ALPHA = 100.0


def masks(grid):
    unsafe = (grid.labels & 8) > 0
    return {a: ((grid.labels & (1 << k)) > 0) & ~unsafe for k, a in enumerate(("s1", "s2", "s3"))}, unsafe


@pytest.fixture(scope="module")
def s2s3(grid):
    m, unsafe = masks(grid)
    return [direct_option(grid, m[a], unsafe, name=a) for a in ("s2", "s3")], unsafe


# ---- GCD


def test_gcd_of_equal_pair():
    assert gcd_value([0.3, 0.3], 1.0) == pytest.approx(0.3 + math.log(2))
    assert gcd_value([0.3, 0.3], -2.0) == pytest.approx(0.3 - math.log(2) / 2)


def test_gcd_limits_at_moderate_eta():
    assert gcd_value([0.9, 0.1], 50) == pytest.approx(0.9, abs=1e-3)
    assert gcd_value([0.9, 0.1], -50) == pytest.approx(0.1, abs=1e-3)


def test_gcd_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        gcd_value([0.1, 0.2], 0.0)
    with pytest.raises(ValueError):
        gcd_value([], 1.0)


def test_gcd_weights():
    assert gcd_value([0.2, 0.7], 3.0, weights=[1.0, 0.0]) == pytest.approx(0.2)


separated = st.lists(st.floats(0, 1), min_size=2, max_size=6).filter(
    lambda xs: np.min(np.diff(np.sort(xs))) >= 0.01
)


@settings(max_examples=100, deadline=None)
@given(separated, st.sampled_from([50.0, 200.0]))
def test_gcd_limit_bound(xs, eta):
    """Distance to max/min is governed by the gap to the runner-up."""
    xs = np.array(xs)
    s = np.sort(xs)
    for sign, extreme, gap in ((1, s[-1], s[-1] - s[-2]), (-1, s[0], s[1] - s[0])):
        err = abs(gcd_value(xs, sign * eta) - extreme)
        bound = math.log1p((len(xs) - 1) * math.exp(-eta * gap)) / eta
        assert err <= bound + 1e-12
        assert err <= math.log(len(xs)) / eta + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.floats(0.5, 50))
def test_gcd_brackets(xs, eta):
    xs = np.array(xs)
    assert xs.max() - 1e-12 <= gcd_value(xs, eta) <= xs.max() + math.log(len(xs)) / eta + 1e-12
    assert xs.min() - math.log(len(xs)) / eta - 1e-12 <= gcd_value(xs, -eta) <= xs.min() + 1e-12


# ---- exclusion


def test_exclusion_clamps_when_joint_dominates():
    assert exclusion_q(np.array([0.4]), np.array([0.4]), 10)[0] == 0.0
    assert exclusion_q(np.array([0.3]), np.array([0.5]), 10)[0] == 0.0


def test_exclusion_near_first_operand_when_joint_small():
    q = exclusion_q(np.array([0.9]), np.array([0.0]), 50)[0]
    assert abs(q - 0.9) < 0.01


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 1), st.floats(0, 1), st.floats(1, 30))
def test_exclusion_inverts_disjunction(q1, frac, eta):
    q12 = q1 * frac * 0.9
    qm = exclusion_q(np.array([q1]), np.array([q12]), eta)[0]
    if qm > 0:
        assert gcd_value([q12, qm], eta) == pytest.approx(q1, abs=1e-9)


# ---- selection


def test_single_operand_selects_it():
    T = np.random.default_rng(0).random((1, 5, 1))
    assert np.allclose(option_selection(T, 10), 1.0)


def test_symmetric_tables_give_uniform():
    T = np.full((2, 4, 2), 0.4)
    assert np.allclose(option_selection(T, -10), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([-10.0, -1.0, 1.0, 10.0]))
def test_selection_rows_are_distributions(seed, eta):
    T = np.random.default_rng(seed).random((3, 6, 2))
    pi = option_selection(T, eta)
    assert np.allclose(pi.sum(axis=1), 1) and (pi >= 0).all()


def test_conjunction_prefers_the_option_good_for_both():
    # option 0 is mediocre for both tasks, option 1 great for one and bad for the other
    T = np.array([[[0.6, 0.9]], [[0.6, 0.1]]])
    assert option_selection(T, -10)[0, 0] > 0.5
    assert option_selection(T, -10, literal=True)[0, 0] < 0.5
    assert option_selection(T, 10)[0, 1] > 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        CompositionSpec("or", ("a", "b"), -1.0)
    with pytest.raises(ValueError):
        CompositionSpec("and", ("a", "b"), 2.0)
    with pytest.raises(ValueError):
        CompositionSpec("minus", ("a",), 2.0)
    with pytest.raises(ValueError):
        CompositionSpec("xor", ("a", "b"))
    assert CompositionSpec("and", ("a", "b")).resolved_eta < 0


# ---- composition on the grid


@pytest.mark.parametrize("eta", [5.0, 10.0, 20.0])
def test_or_composition_peaks_in_goal(grid, s2s3, eta):
    ops, unsafe = s2s3
    comp = compose(CompositionSpec("or", ("s2", "s3"), eta), ops, grid)
    task = ssp_from_sets(grid, comp.goal, unsafe)
    V = evaluate_on_task(task, comp.policy, comp.termination)
    shown = np.where(comp.goal, ALPHA, V)
    assert comp.goal[np.argmax(shown)]
    assert V[~comp.goal].max() < ALPHA


def test_and_composition_close_to_direct(grid, s2s3):
    ops, unsafe = s2s3
    comp = compose(CompositionSpec("and", ("s2", "s3"), -10.0), ops, grid)
    task = ssp_from_sets(grid, comp.goal, unsafe, gamma=1.0, alpha=1.0)
    direct = direct_option(grid, comp.goal, unsafe)
    s0 = grid.initial_state
    p_comp = evaluate_on_task(task, comp.policy, comp.termination)[s0]
    p_direct = evaluate_on_task(task, direct.policy)[s0]
    assert p_comp >= p_direct - 0.05
    assert np.allclose(comp.policy.sum(axis=1), 1)


def test_minus_goal_and_policy(grid, s2s3):
    ops, unsafe = s2s3
    comp = compose(CompositionSpec("minus", ("s2", "s3"), 10.0), ops, grid)
    assert np.array_equal(comp.goal, ops[0].goal & ~ops[1].goal)
    assert np.allclose(comp.policy.sum(axis=1), 1)


def test_mismatched_unsafe_sets_raise(grid, s2s3):
    ops, unsafe = s2s3
    m, _ = masks(grid)
    other = direct_option(grid, m["s1"], np.zeros(grid.n_states, dtype=bool), name="s1")
    with pytest.raises(ModelError):
        compose(CompositionSpec("or", ("s2", "s1"), 10.0), [ops[0], other], grid)


def test_primitive_option_terminates_on_goal_and_unsafe(grid):
    m, unsafe = masks(grid)
    opt = make_primitive_option(ssp_from_sets(grid, m["s1"], unsafe), name="s1")
    assert np.array_equal(opt.termination, m["s1"] | unsafe)
    assert opt.solve_info.iterations > 0 and np.allclose(opt.policy.sum(axis=1), 1)


def test_save_load_round_trip(grid, s2s3, tmp_path):
    ops, _ = s2s3
    save_options(ops, tmp_path)
    back = load_options(tmp_path, grid.n_states, grid.n_actions)
    for a, b in zip(ops, back):
        assert a.name == b.name
        assert np.allclose(a.policy, b.policy, atol=1e-11)
        assert np.array_equal(a.termination, b.termination)
