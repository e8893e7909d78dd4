"""Automaton-guided decomposition of a task into conditional-reachability subtasks."""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .scltl import DFA, Alphabet


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankedDFA:
    """A DFA with the minimal distance (in transitions) from each state to F.

    ``symbols`` is the alphabet the ranking is computed over.  It defaults
    to every bitmask, but planning usually restricts it to the labels that
    actually occur in the MDP.
    """

    dfa: DFA
    symbols: tuple[int, ...]
    rank: tuple[float, ...]

    def level(self, k: int) -> frozenset[int]:
        return frozenset(q for q, r in enumerate(self.rank) if r == k)

    @property
    def levels(self) -> list[frozenset[int]]:
        finite = [r for r in self.rank if r != math.inf]
        return [self.level(k) for k in range(int(max(finite, default=-1)) + 1)]


@dataclass(frozen=True)
class TransitionClass:
    prog: dict[int, frozenset[int]]
    unsafe: dict[int, frozenset[int]]
    self_loop: dict[int, frozenset[int]]
    lateral: dict[int, frozenset[int]]


@dataclass(frozen=True)
class CondReachTask:
    """``!unsafe U goal`` with both sides given by their symbol sets.

    ``universe`` is the symbol set the denotations are relative to;
    ``expr`` describes the goal as a composition of atoms
    (``("atom", p)``, ``("and", ps)``, ``("or", ps)``, ``("minus", p, qs)``)
    or is None when no such description exists.
    """

    goal: frozenset[int]
    unsafe: frozenset[int]
    universe: frozenset[int]
    ap: tuple[str, ...]
    sources: frozenset[int] = field(default=frozenset(), compare=False)
    expr: tuple | None = field(default=None, compare=False)

    @property
    def key(self) -> tuple[frozenset[int], frozenset[int]]:
        return self.goal, self.unsafe

    @property
    def primitive(self) -> bool:
        return self.expr is not None and self.expr[0] == "atom"

    @property
    def atom(self) -> str | None:
        return self.expr[1] if self.primitive else None

    def goal_text(self) -> str:
        return expr_text(self.expr) if self.expr else _symbols_text(self.goal, self.ap)

    def unsafe_text(self) -> str:
        if not self.unsafe:
            return "false"
        e = describe(self.unsafe, self.universe, self.ap)
        return expr_text(e) if e else _symbols_text(self.unsafe, self.ap)

    def __str__(self) -> str:
        if not self.unsafe:
            return f"true U {self.goal_text()}"
        u = self.unsafe_text()
        neg = f"!{u}" if u.isidentifier() else f"!({u})"
        return f"{neg} U {self.goal_text()}"

    def to_json(self) -> dict:
        return {
            "formula": str(self),
            "goal": self.goal_text(),
            "unsafe": self.unsafe_text(),
            "goal_symbols": sorted(self.goal),
            "unsafe_symbols": sorted(self.unsafe),
            "universe": sorted(self.universe),
            "ap": list(self.ap),
            "sources": sorted(self.sources),
            "expr": _expr_json(self.expr),
            "primitive": self.primitive,
        }

    @classmethod
    def from_json(cls, d: dict) -> CondReachTask:
        return cls(
            frozenset(d["goal_symbols"]),
            frozenset(d["unsafe_symbols"]),
            frozenset(d["universe"]),
            tuple(d["ap"]),
            frozenset(d.get("sources", ())),
            _expr_from_json(d.get("expr")),
        )


def _expr_json(e):
    if e is None:
        return None
    return [e[0]] + [list(x) if isinstance(x, tuple) else x for x in e[1:]]


def _expr_from_json(e):
    if e is None:
        return None
    return (e[0],) + tuple(tuple(x) if isinstance(x, list) else x for x in e[1:])


def expr_text(e: tuple) -> str:
    op = e[0]
    if op == "atom":
        return e[1]
    if op == "and":
        return " & ".join(e[1])
    if op == "or":
        return " | ".join(e[1])
    rest = e[2][0] if len(e[2]) == 1 else "(" + " | ".join(e[2]) + ")"
    return f"{e[1]} \\ {rest}"


def _symbols_text(symbols: Iterable[int], ap: Sequence[str]) -> str:
    alpha = Alphabet(tuple(ap))
    return " | ".join("{" + ",".join(sorted(alpha.decode(s))) + "}" for s in sorted(symbols)) or "false"


def denotation(expr: tuple, universe: Iterable[int], ap: Sequence[str]) -> frozenset[int]:
    """Symbols in ``universe`` satisfying the composition ``expr``."""
    idx = {p: i for i, p in enumerate(ap)}

    def has(s: int, p: str) -> bool:
        return bool(s >> idx[p] & 1)

    op = expr[0]
    if op == "atom":
        test = lambda s: has(s, expr[1])
    elif op == "and":
        test = lambda s: all(has(s, p) for p in expr[1])
    elif op == "or":
        test = lambda s: any(has(s, p) for p in expr[1])
    elif op == "minus":
        test = lambda s: has(s, expr[1]) and not any(has(s, p) for p in expr[2])
    else:
        raise ValueError(f"unknown composition {op!r}")
    return frozenset(s for s in universe if test(s))


def _candidates(ap: Sequence[str]):
    atoms = list(ap)
    for p in atoms:
        yield ("atom", p)
    for k in range(2, len(atoms) + 1):
        for combo in itertools.combinations(atoms, k):
            yield ("and", combo)
            yield ("or", combo)
    for p in atoms:
        others = [a for a in atoms if a != p]
        for k in range(1, len(others) + 1):
            for combo in itertools.combinations(others, k):
                yield ("minus", p, combo)


def describe(
    goal: frozenset[int], universe: Iterable[int], ap: Sequence[str], dont_care: Iterable[int] = ()
) -> tuple | None:
    """Smallest atom / and / or / minus expression whose denotation is ``goal``.

    When no expression matches exactly, one whose denotation lies between
    ``goal`` and ``goal | dont_care`` is accepted instead.
    """
    universe = frozenset(universe)
    if not goal:
        return None
    for e in _candidates(ap):
        if denotation(e, universe, ap) == goal:
            return e
    upper = goal | frozenset(dont_care)
    for e in _candidates(ap):
        d = denotation(e, universe, ap)
        if goal <= d <= upper:
            return e
    return None


# ---------------------------------------------------------------- operations


def rank_states(dfa: DFA, symbols: Iterable[int] | None = None) -> RankedDFA:
    """Backward BFS from F over the transitions labelled by ``symbols``.

    With a restricted symbol set, states that can no longer reach F are
    ranked infinite just like the sink.  Without restriction such a state
    can only be the sink; anything else means the DFA was not trimmed.
    """
    restricted = symbols is not None
    syms = tuple(sorted(set(symbols))) if restricted else tuple(range(dfa.delta.shape[1]))
    n = dfa.n_states
    preds: list[set[int]] = [set() for _ in range(n)]
    for q in range(n):
        for s in syms:
            preds[dfa.step(q, s)].add(q)
    rank = [math.inf] * n
    queue = deque()
    for q in dfa.accepting:
        rank[q] = 0
        queue.append(q)
    while queue:
        q = queue.popleft()
        for p in preds[q]:
            if rank[p] == math.inf:
                rank[p] = rank[q] + 1
                queue.append(p)
    if not restricted:
        dead = [q for q in range(n) if rank[q] == math.inf and q != dfa.sink]
        if dead:
            raise DecompositionError(f"states {dead} cannot reach an accepting state but are not the sink")
    return RankedDFA(dfa, syms, tuple(rank))


def classify_transitions(rdfa: RankedDFA) -> TransitionClass:
    dfa = rdfa.dfa
    prog, unsafe, loop, lateral = {}, {}, {}, {}
    for q in range(dfa.n_states):
        p, u, sl, lat = set(), set(), set(), set()
        for s in rdfa.symbols:
            q2 = dfa.step(q, s)
            if q2 == q:
                sl.add(s)
            elif q2 == dfa.sink or (rdfa.rank[q2] == math.inf and rdfa.rank[q] != math.inf):
                u.add(s)
            elif rdfa.rank[q2] == rdfa.rank[q] - 1:
                p.add(s)
            else:
                lat.add(s)
        prog[q], unsafe[q], loop[q], lateral[q] = map(frozenset, (p, u, sl, lat))
    return TransitionClass(prog, unsafe, loop, lateral)


def _reach_sets(rdfa: RankedDFA) -> list[set[int]]:
    dfa = rdfa.dfa
    out = []
    for q in range(dfa.n_states):
        seen = {q}
        stack = [q]
        while stack:
            x = stack.pop()
            for s in rdfa.symbols:
                y = dfa.step(x, s)
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        out.append(seen)
    return out


def decompose(
    rdfa: RankedDFA, classes: TransitionClass | None = None, advancing: bool = True
) -> list[CondReachTask]:
    """One task per progressing edge ``q -> q'``; the goal is the set of symbols on it.

    The unsafe side is the union of the unsafe symbols of ``q``.  Tasks with
    equal (goal, unsafe) denotations are merged.  With ``advancing`` set,
    lateral edges into a state that can never lead back to ``q`` also yield
    tasks (e.g. ``s2 \\ s3`` out of the state waiting for both ``s2`` and
    ``s3``).
    """
    classes = classes or classify_transitions(rdfa)
    dfa = rdfa.dfa
    universe = frozenset(rdfa.symbols)
    reach = _reach_sets(rdfa) if advancing else None
    found: dict[tuple, CondReachTask] = {}
    for q in range(dfa.n_states):
        if rdfa.rank[q] in (0, math.inf):
            continue
        by_target: dict[int, set[int]] = {}
        for s in classes.prog[q]:
            by_target.setdefault(dfa.step(q, s), set()).add(s)
        if advancing:
            for s in classes.lateral[q]:
                t = dfa.step(q, s)
                if rdfa.rank[t] != math.inf and q not in reach[t]:
                    by_target.setdefault(t, set()).add(s)
        unsafe = classes.unsafe[q]
        advancing_syms = frozenset().union(*by_target.values()) if by_target else frozenset()
        for target in sorted(by_target):
            goal = frozenset(by_target[target])
            expr = describe(goal, universe - unsafe, dfa.ap, advancing_syms - goal)
            if expr is not None:
                goal = denotation(expr, universe - unsafe, dfa.ap)
            task = CondReachTask(goal, unsafe, universe, dfa.ap, frozenset([q]), expr)
            if task.key in found:
                old = found[task.key]
                task = CondReachTask(goal, unsafe, universe, dfa.ap, old.sources | {q}, old.expr or expr)
            found[task.key] = task
    return sorted(found.values(), key=_task_order)


def _task_order(t: CondReachTask):
    return (not t.primitive, t.goal_text(), sorted(t.unsafe))


def primitive_task(atom: str, unsafe: frozenset[int], universe: frozenset[int], ap: Sequence[str]) -> CondReachTask:
    goal = denotation(("atom", atom), universe - unsafe, ap)
    return CondReachTask(goal, unsafe, universe, tuple(ap), frozenset(), ("atom", atom))


def prune_to_primitives(tasks: Iterable[CondReachTask]) -> tuple[list[CondReachTask], list[CondReachTask]]:
    """Split tasks into primitive ones (atomic goal) and compositions of them.

    Returns ``(primitives, composites)``.  Every atom used by a composite
    gets a primitive task with the same unsafe side, even when the DFA never
    progresses on that atom alone.
    """
    tasks = list(tasks)
    prims: dict[tuple, CondReachTask] = {}
    composites = []
    for t in tasks:
        if t.expr is None:
            raise DecompositionError(
                f"goal of task {t} is not a conjunction, disjunction or exclusion of atoms"
            )
        if t.primitive:
            prims.setdefault(t.key, t)
        else:
            composites.append(t)
    for t in composites:
        for atom in _operand_atoms(t.expr):
            p = primitive_task(atom, t.unsafe, t.universe, t.ap)
            if p.key not in prims:
                prims[p.key] = p
    return sorted(prims.values(), key=_task_order), sorted(composites, key=_task_order)


def _operand_atoms(expr: tuple) -> list[str]:
    if expr[0] in ("and", "or"):
        return list(expr[1])
    if expr[0] == "minus":
        return [expr[1], *expr[2]]
    return [expr[1]]


def decompose_dfa(dfa: DFA, symbols: Iterable[int] | None = None):
    """Rank, classify, decompose and prune in one call."""
    rdfa = rank_states(dfa, symbols)
    classes = classify_transitions(rdfa)
    tasks = decompose(rdfa, classes)
    prims, comps = prune_to_primitives(tasks)
    return rdfa, classes, tasks, prims, comps


def tasks_to_json(tasks: Sequence[CondReachTask]) -> str:
    return json.dumps({"tasks": [t.to_json() for t in tasks]}, indent=1)


def tasks_from_json(text: str) -> list[CondReachTask]:
    return [CondReachTask.from_json(d) for d in json.loads(text)["tasks"]]
