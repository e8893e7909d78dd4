from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compplan.scltl import (
    DFA,
    TRUE,
    Alphabet,
    And,
    Atom,
    Eventually,
    FormulaError,
    NegAtom,
    Next,
    Or,
    StateBlowup,
    Until,
    eval_word,
    eval_words,
    guard_eventualities,
    normalize,
    parse,
    to_dfa,
    translate,
    words,
)

AP = ("a", "b", "c")


def all_words(n_symbols, length):
    rows = list(itertools.product(range(n_symbols), repeat=length))
    return np.array(rows, dtype=np.int64).reshape(len(rows), length)


def test_eventually_parses_to_true_until():
    assert parse("F a", ["a"]) == Until(TRUE, Atom("a"))


def test_primitive_task_form():
    assert parse("!C U s1", ["s1", "C"]) == Until(NegAtom("C"), Atom("s1"))


@pytest.mark.parametrize("text", ["a U", "(a", "a &", "a $ b", "!(a U b)", "a \\ X b"])
def test_malformed_input_raises(text):
    with pytest.raises(FormulaError):
        parse(text, AP)


def test_unknown_atom_is_named():
    with pytest.raises(FormulaError, match="zz"):
        parse("F zz", AP)


def test_precedence_and_associativity():
    assert parse("a | b & c", AP) == Or(Atom("a"), And(Atom("b"), Atom("c")))
    assert parse("a U b U c", AP) == Until(Atom("a"), Until(Atom("b"), Atom("c")))
    assert parse("a & b U c", AP) == And(Atom("a"), Until(Atom("b"), Atom("c")))


def test_exclusion_desugars_onto_atoms():
    assert parse("a \\ b", AP) == And(Atom("a"), NegAtom("b"))
    assert parse("a \\ (b | c)", AP) == And(Atom("a"), And(NegAtom("b"), NegAtom("c")))


def test_eval_word_examples():
    f = Until(NegAtom("C"), Atom("g"))
    assert eval_word(Atom("a"), [{"a"}])
    assert eval_word(f, [set(), {"g"}])
    assert not eval_word(f, [{"C"}, {"g"}])
    assert not eval_word(Next(Atom("a")), [{"a"}])
    assert eval_word(TRUE, [])
    assert not eval_word(Eventually(Atom("a")), [])


def test_eventually_dfa_shape():
    dfa = translate("F a", ["a"])
    assert dfa.n_states == 2
    qf = dfa.step(dfa.q0, 1)
    assert qf in dfa.accepting and dfa.q0 not in dfa.accepting
    assert dfa.step(dfa.q0, 0) == dfa.q0
    assert dfa.step(qf, 0) == dfa.step(qf, 1) == qf
    for n in range(6):
        W = all_words(2, n)
        assert np.array_equal(dfa.accepts_many(W), eval_words(Eventually(Atom("a")), W, Alphabet(("a",))))


def test_true_accepts_everything():
    dfa = translate("true", ["a"])
    assert dfa.accepts(()) and all(dfa.accepts(w) for w in words(2, 4))


def test_empty_word_rejected_unless_true():
    for text in ("F a", "a", "a U b", "X true"):
        assert not translate(text, ["a", "b"]).accepts(())


def test_state_cap():
    with pytest.raises(StateBlowup):
        translate("F (a & X F (b & X F (c & X F a)))", AP, max_states=3)


def test_dfa_json_round_trip(tmp_path):
    dfa = translate("!c U (a & F b)", AP)
    d = dfa.to_json()
    assert set(d) == {"ap", "states", "q0", "accepting", "sink", "delta"}
    again = DFA.from_json(json.loads(json.dumps(d)))
    assert np.array_equal(again.delta, dfa.delta) and again.accepting == dfa.accepting
    dfa.save(tmp_path / "d.json")
    assert DFA.load(tmp_path / "d.json").q0 == dfa.q0


def test_dfa_is_complete_and_trim():
    dfa = translate("!c U (a & (F b & F c))", AP)
    assert dfa.delta.shape == (dfa.n_states, 8)
    assert ((dfa.delta >= 0) & (dfa.delta < dfa.n_states)).all()
    assert dfa.sink is not None and (dfa.delta[dfa.sink] == dfa.sink).all()
    assert dfa.sink not in dfa.accepting


def test_guarding_unfolds_eventualities():
    f = guard_eventualities(parse("!C U F (s1 & (F s2 & F s3))", ["s1", "s2", "s3", "C"]), "C")
    assert str(f) == "(!C U (s1 & ((!C U s2) & (!C U s3))))"


# ---- property tests against the brute-force evaluator

atoms = st.sampled_from([Atom(p) for p in AP] + [NegAtom(p) for p in AP] + [TRUE])


def formulas():
    return st.recursive(
        atoms,
        lambda sub: st.one_of(
            st.builds(And, sub, sub),
            st.builds(Or, sub, sub),
            st.builds(Next, sub),
            st.builds(Until, sub, sub),
            st.builds(Eventually, sub),
        ),
        max_leaves=6,
    )


@settings(max_examples=60, deadline=None)
@given(formulas())
def test_dfa_matches_oracle(f):
    dfa = to_dfa(f, AP)
    nf = normalize(f)
    for n in range(0, 5):
        W = all_words(8, n)
        assert np.array_equal(dfa.accepts_many(W), eval_words(nf, W, Alphabet(AP)))


@settings(max_examples=40, deadline=None)
@given(formulas())
def test_normalize_idempotent(f):
    assert normalize(normalize(f)) == normalize(f)


@settings(max_examples=40, deadline=None)
@given(formulas(), st.lists(st.integers(0, 7), max_size=5))
def test_vector_oracle_matches_recursive(f, word):
    alpha = Alphabet(AP)
    sets = [alpha.decode(s) for s in word]
    W = np.array([word], dtype=np.int64).reshape(1, len(word))
    assert eval_words(normalize(f), W, alpha)[0] == eval_word(f, sets)


@pytest.mark.parametrize("name", ["phi1", "phi2", "phi3"])
def test_grid_formulas_short_words(name):
    from compplan.harness import DEFAULT_FORMULAS

    ap = ("s1", "s2", "s3", "C")
    f = guard_eventualities(parse(DEFAULT_FORMULAS[name], ap), "C")
    dfa = to_dfa(f, ap)
    for n in range(5):
        W = all_words(16, n)
        assert np.array_equal(dfa.accepts_many(W), eval_words(normalize(f), W, Alphabet(ap)))


def test_guarded_state_counts():
    from compplan.harness import DEFAULT_FORMULAS

    ap = ("s1", "s2", "s3", "C")
    sizes = [to_dfa(guard_eventualities(parse(DEFAULT_FORMULAS[k], ap), "C"), ap).n_states for k in ("phi1", "phi2", "phi3")]
    assert sizes[0] == 6 and sizes[2] <= sizes[1] <= sizes[0]
