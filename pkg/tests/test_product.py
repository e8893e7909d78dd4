from __future__ import annotations

import numpy as np
import pytest

from compplan.mdp import ModelError, ssp_from_sets
from compplan.options import OptionPolicy, make_primitive_option
from compplan.product import (
    build_macro_model,
    build_product,
    evaluate_policy,
    max_satisfaction,
    plan,
    satisfaction_probability,
    simulate_option,
)
from compplan.scltl import translate

from .conftest import chain_mdp


def two_state():
    """State 0 moves to the goal state 1 with prob 0.5 per step."""
    P = np.zeros((2, 1, 2))
    P[0, 0] = [0.5, 0.5]
    P[1, 0, 1] = 1.0
    return chain_mdp(P, [0, 1], ap=("a",))


def test_eventually_on_single_labelled_state():
    P = np.ones((1, 1, 1))
    mdp = chain_mdp(P, [1], ap=("a",))
    prod = build_product(mdp, translate("F a", ["a"]))
    assert prod.n_states == 1 and prod.accepting[prod.init]
    p = satisfaction_probability(prod, np.ones((1, 1)))
    assert p[prod.init] == 1.0


def test_sink_has_zero_value():
    mdp = two_state()
    prod = build_product(mdp, translate("X !a", ["a"]), alpha=1.0)
    r = plan(prod, "optimal", tol=1e-10)
    assert prod.sink.any()
    assert (r.values[prod.sink] == 0).all()
    p, _ = max_satisfaction(prod)
    assert p[prod.init] == pytest.approx(0.5)


def test_product_size_bound(grid):
    dfa = translate("!C U (s1 & F s2)", grid.ap)
    prod = build_product(grid, dfa)
    assert prod.n_states <= grid.n_states * dfa.n_states
    assert np.allclose(prod.P.sum(axis=2), 1.0)


def test_alphabet_mismatch(grid):
    with pytest.raises(ModelError):
        build_product(grid, translate("F a", ["a"]))


def test_macro_two_state_by_hand():
    mdp = two_state()
    prod = build_product(mdp, translate("F a", ["a"]), alpha=1.0)
    opt = OptionPolicy("go", np.ones((2, 1)), np.array([False, True]), np.array([False, True]), np.zeros(2, dtype=bool))
    g = 0.9
    m = build_macro_model(prod, [opt], g)
    x0 = prod.init
    x1 = [x for x in range(prod.n_states) if prod.accepting[x]][0]
    # sum_k g^k 0.5^k 0.5 over k >= 1
    assert m.D[0, x0, x1] == pytest.approx(0.5 * g / (1 - 0.5 * g))
    assert m.R[0, x0] == pytest.approx(0.5 / (1 - 0.5 * g))
    m1 = build_macro_model(prod, [opt], 1.0)
    assert m1.D[0, x0].sum() == pytest.approx(1.0)
    assert not m.admissible[0, x1]


def test_zero_duration_option_is_not_admissible(grid):
    unsafe = (grid.labels & 8) > 0
    goal = ((grid.labels & 1) > 0) & ~unsafe
    opt = make_primitive_option(ssp_from_sets(grid, goal, unsafe), name="s1")
    prod = build_product(grid, translate("!C U F s2", grid.ap), alpha=100.0)
    m = build_macro_model(prod, [opt], 0.9)
    s_of = prod.pairs[:, 0]
    assert not m.admissible[0, goal[s_of]].any()
    assert m.admissible[0, ~opt.termination[s_of] & ~prod.absorbing].all()


def test_option_that_never_stops_is_rejected():
    P = np.zeros((3, 2, 3))
    P[0, 0, 0] = 1  # a0 waits forever
    P[0, 1, 1] = 1
    P[1, :, 1] = 1
    P[2, :, 2] = 1
    mdp = chain_mdp(P, [0, 1, 0], ap=("a",))
    prod = build_product(mdp, translate("F a", ["a"]))
    lazy = OptionPolicy("lazy", np.array([[1.0, 0], [1, 0], [1, 0]]), np.array([False, True, False]),
                        np.array([False, True, False]), np.zeros(3, dtype=bool))
    build_macro_model(prod, [lazy], 0.9)
    with pytest.raises(RuntimeError):
        build_macro_model(prod, [lazy], 1.0)


@pytest.fixture(scope="module")
def phi2_setup():
    from compplan.harness import Experiment, ExperimentConfig

    exp = Experiment(ExperimentConfig())
    return exp.task("phi2")


def test_planner_hierarchy(phi2_setup):
    prod, macro = phi2_setup.product, phi2_setup.macro
    n = {k: plan(prod, k, macro if k in ("option", "mixed") else None, tol=1e-3).iterations for k in ("action", "option", "mixed")}
    assert n["option"] < n["mixed"] < n["action"]
    a = plan(prod, "action", None, tol=1e-10, operator="hardmax")
    m = plan(prod, "mixed", macro, tol=1e-10, operator="hardmax")
    assert (m.values >= a.values - 1e-8).all()


def test_max_satisfaction_dominates(phi2_setup):
    prod, macro, macro1 = phi2_setup.product, phi2_setup.macro, phi2_setup.macro1
    p_max, pol = max_satisfaction(prod)
    assert np.allclose(pol.sum(axis=1), 1)
    for kind in ("action", "option", "mixed"):
        r = plan(prod, kind, macro if kind != "action" else None)
        p = satisfaction_probability(prod, r.policy, macro1 if kind != "action" else None)
        assert (p <= p_max + 1e-9).all()


def test_evaluation_needs_macro_for_options(phi2_setup):
    prod, macro = phi2_setup.product, phi2_setup.macro
    r = plan(prod, "option", macro)
    with pytest.raises(ValueError):
        evaluate_policy(prod, r.policy, None)
    V = evaluate_policy(prod, r.policy, macro)
    assert V[prod.init] > 0


def test_rollout_duration_and_endpoints(phi2_setup):
    prod = phi2_setup.product
    opt = phi2_setup.options[0]
    x = int(np.flatnonzero(build_macro_model(prod, [opt], 0.9).admissible[0])[0])
    ends, steps = simulate_option(prod, opt, x, 2000, 0.9, np.random.default_rng(1))
    assert (steps >= 1).all()
    assert set(ends.tolist()) <= set(np.flatnonzero(phi2_setup.macro1.D[0, x] > 0).tolist())


def test_unknown_planner(phi2_setup):
    with pytest.raises(ValueError):
        plan(phi2_setup.product, "greedy")
    with pytest.raises(ValueError):
        plan(phi2_setup.product, "option", None)
