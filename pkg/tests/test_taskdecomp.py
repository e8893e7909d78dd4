from __future__ import annotations

import math

import numpy as np
import pytest

from compplan.harness import DEFAULT_FORMULAS
from compplan.scltl import DFA, guard_eventualities, parse, to_dfa, translate
from compplan.taskdecomp import (
    CondReachTask,
    DecompositionError,
    classify_transitions,
    decompose,
    decompose_dfa,
    prune_to_primitives,
    rank_states,
    tasks_from_json,
    tasks_to_json,
)

AP = ("s1", "s2", "s3", "C")


def phi(name):
    return to_dfa(guard_eventualities(parse(DEFAULT_FORMULAS[name], AP), "C"), AP)


@pytest.fixture(scope="module")
def phi1(grid):
    return decompose_dfa(phi("phi1"), grid.label_symbols())


def test_single_eventuality_gives_one_task():
    dfa = translate("F a", ["a"])
    rdfa, classes, tasks, prims, comps = decompose_dfa(dfa)
    assert rdfa.rank[dfa.q0] == 1
    assert [str(t) for t in tasks] == ["true U a"] and prims == tasks and comps == []


def test_phi1_levels(phi1):
    rdfa = phi1[0]
    assert [len(level) for level in rdfa.levels] == [1, 3, 1]
    assert rdfa.level(2) == {rdfa.dfa.q0}
    assert rdfa.rank[rdfa.dfa.sink] == math.inf


def test_phi1_initial_state_edges(phi1):
    rdfa, classes = phi1[0], phi1[1]
    q0 = rdfa.dfa.q0
    c = 1 << AP.index("C")
    s1 = 1 << AP.index("s1")
    assert all(s & c for s in classes.unsafe[q0])
    assert all(s & s1 and not s & c for s in classes.prog[q0])
    assert 0 in classes.self_loop[q0]


def test_phi1_tasks(phi1):
    _, _, tasks, prims, comps = phi1
    assert sorted(map(str, prims)) == ["!C U s1", "!C U s2", "!C U s3"]
    assert {t.goal_text() for t in comps} == {"s2 & s3", "s2 \\ s3", "s3 \\ s2"}
    assert all(not t.goal & t.unsafe for t in tasks)


def test_progressing_edges_drop_rank_by_one(phi1):
    rdfa, classes = phi1[0], phi1[1]
    for q, syms in classes.prog.items():
        for s in syms:
            assert rdfa.rank[rdfa.dfa.step(q, s)] == rdfa.rank[q] - 1


def test_edge_classes_partition_symbols(phi1):
    rdfa, classes = phi1[0], phi1[1]
    for q in range(rdfa.dfa.n_states):
        parts = [classes.prog[q], classes.unsafe[q], classes.self_loop[q], classes.lateral[q]]
        assert sum(map(len, parts)) == len(rdfa.symbols)
        assert frozenset().union(*parts) == frozenset(rdfa.symbols)


def test_phi3_single_composite(grid):
    _, _, _, prims, comps = decompose_dfa(phi("phi3"), grid.label_symbols())
    assert [t.goal_text() for t in comps] == ["s2 & s3"]
    assert {t.atom for t in prims} == {"s2", "s3"}


def test_phi2_composites(grid):
    _, _, _, prims, comps = decompose_dfa(phi("phi2"), grid.label_symbols())
    assert {t.goal_text() for t in comps} == {"s1 | s3", "s2 & s3"}
    assert {t.atom for t in prims} == {"s1", "s2", "s3"}


def test_prune_is_fixpoint_on_primitives(phi1):
    prims = phi1[3]
    again, comps = prune_to_primitives(prims)
    assert again == prims and comps == []


def test_unranked_nonsink_rejected():
    # a state that cannot reach acceptance but is not the sink (hand-built)
    delta = np.array([[1, 2], [1, 1], [2, 2]])
    dfa = DFA(("a",), delta, 0, frozenset({2}), None)
    with pytest.raises(DecompositionError):
        rank_states(dfa)


def test_json_round_trip(phi1):
    tasks = phi1[3] + phi1[4]
    back = tasks_from_json(tasks_to_json(tasks))
    assert back == tasks
    assert [t.expr for t in back] == [t.expr for t in tasks]
    assert all(isinstance(t, CondReachTask) for t in back)


def test_lateral_edges_can_be_ignored(grid):
    rdfa = rank_states(phi("phi1"), grid.label_symbols())
    plain = decompose(rdfa, classify_transitions(rdfa), advancing=False)
    assert {t.goal_text() for t in plain} <= {t.goal_text() for t in decompose(rdfa)}
