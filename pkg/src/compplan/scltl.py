"""sc-LTL formulas over finite words: parsing, brute-force semantics, DFA translation."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FormulaError(ValueError):
    """Malformed formula text or an operator applied outside the fragment."""


class StateBlowup(RuntimeError):
    pass


# ---------------------------------------------------------------- AST


@dataclass(frozen=True)
class Formula:
    def __and__(self, other: Formula) -> Formula:
        return And(self, other)

    def __or__(self, other: Formula) -> Formula:
        return Or(self, other)


@dataclass(frozen=True)
class TrueF(Formula):
    def __str__(self) -> str:
        return "true"


@dataclass(frozen=True)
class Atom(Formula):
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class NegAtom(Formula):
    name: str

    def __str__(self) -> str:
        return f"!{self.name}"


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula

    def __str__(self) -> str:
        return f"({self.left} & {self.right})"


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula

    def __str__(self) -> str:
        return f"({self.left} | {self.right})"


@dataclass(frozen=True)
class Next(Formula):
    arg: Formula

    def __str__(self) -> str:
        return f"X {self.arg}"


@dataclass(frozen=True)
class Until(Formula):
    left: Formula
    right: Formula

    def __str__(self) -> str:
        if isinstance(self.left, TrueF):
            return f"(F {self.right})"
        return f"({self.left} U {self.right})"


@dataclass(frozen=True)
class Eventually(Formula):
    arg: Formula

    def __str__(self) -> str:
        return f"(F {self.arg})"


TRUE = TrueF()


def normalize(f: Formula) -> Formula:
    """Expand ``F g`` into ``true U g``; idempotent."""
    if isinstance(f, Eventually):
        return Until(TRUE, normalize(f.arg))
    if isinstance(f, (And, Or, Until)):
        return type(f)(normalize(f.left), normalize(f.right))
    if isinstance(f, Next):
        return Next(normalize(f.arg))
    return f


def atoms_of(f: Formula) -> set[str]:
    if isinstance(f, (Atom, NegAtom)):
        return {f.name}
    if isinstance(f, (And, Or, Until)):
        return atoms_of(f.left) | atoms_of(f.right)
    if isinstance(f, (Next, Eventually)):
        return atoms_of(f.arg)
    return set()


def guard_eventualities(f: Formula, unsafe: str) -> Formula:
    """Turn every ``true U g`` into ``!unsafe U g`` and collapse ``a U (a U g)``.

    Reads ``!C U F(...)`` as "avoid C until the whole obligation is met",
    which is the intent of the benchmark tasks; read literally the outer
    until is vacuous because ``!C U F g`` is equivalent to ``F g``.
    """
    f = normalize(f)
    guard = NegAtom(unsafe)

    def rec(g: Formula) -> Formula:
        if isinstance(g, Until):
            left = guard if isinstance(g.left, TrueF) else rec(g.left)
            right = rec(g.right)
            if isinstance(right, Until) and right.left == left:
                return right
            return Until(left, right)
        if isinstance(g, (And, Or)):
            return type(g)(rec(g.left), rec(g.right))
        if isinstance(g, Next):
            return Next(rec(g.arg))
        return g

    return rec(f)


# ---------------------------------------------------------------- alphabet


@dataclass(frozen=True)
class Alphabet:
    """Ordered atomic propositions; a symbol is a bitmask with bit i for ``ap[i]``."""

    ap: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.ap)) != len(self.ap):
            raise ValueError(f"duplicate atomic propositions in {self.ap}")

    @property
    def size(self) -> int:
        return 1 << len(self.ap)

    def symbols(self) -> range:
        return range(self.size)

    def index(self, name: str) -> int:
        try:
            return self.ap.index(name)
        except ValueError:
            raise FormulaError(f"unknown atom {name!r}; alphabet is {list(self.ap)}") from None

    def encode(self, props: Iterable[str]) -> int:
        mask = 0
        for p in props:
            mask |= 1 << self.index(p)
        return mask

    def decode(self, symbol: int) -> frozenset[str]:
        return frozenset(p for i, p in enumerate(self.ap) if symbol >> i & 1)

    def holds(self, name: str, symbol: int) -> bool:
        return bool(symbol >> self.index(name) & 1)

    def symbol_formula(self, symbol: int) -> str:
        parts = [p if symbol >> i & 1 else f"!{p}" for i, p in enumerate(self.ap)]
        return " & ".join(parts) if parts else "true"


# ---------------------------------------------------------------- parser

_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[!&|\\()]))")
_KEYWORDS = {"X", "U", "F", "true"}


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            bad = len(text) - len(text[pos:].lstrip())
            raise FormulaError(f"unexpected character {text[bad]!r} at position {bad}")
        tok = m.group("ident") or m.group("op")
        tokens.append((tok, m.start(m.lastindex)))
        pos = m.end()
    return tokens


class _Parser:
    # precedence (low to high): |  <  & and \  <  U (right assoc)  <  unary
    def __init__(self, text: str, alphabet: Alphabet | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.alphabet = alphabet

    def peek(self) -> str | None:
        return self.tokens[self.i][0] if self.i < len(self.tokens) else None

    def where(self) -> int:
        return self.tokens[self.i][1] if self.i < len(self.tokens) else len(self.text)

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise FormulaError(f"unexpected end of formula at position {len(self.text)}")
        if expected is not None and tok != expected:
            raise FormulaError(f"expected {expected!r} at position {self.where()}, got {tok!r}")
        self.i += 1
        return tok

    def parse(self) -> Formula:
        f = self.disj()
        if self.peek() is not None:
            raise FormulaError(f"unexpected token {self.peek()!r} at position {self.where()}")
        return f

    def disj(self) -> Formula:
        f = self.conj()
        while self.peek() == "|":
            self.take()
            f = Or(f, self.conj())
        return f

    def conj(self) -> Formula:
        f = self.until()
        while self.peek() in ("&", "\\"):
            op = self.take()
            pos = self.where()
            rhs = self.until()
            if op == "&":
                f = And(f, rhs)
            else:
                if not _is_atom_disjunction(rhs):
                    raise FormulaError(
                        f"exclusion at position {pos} needs an atom or a disjunction of atoms on the right"
                    )
                f = And(f, _negate(rhs, pos))
        return f

    def until(self) -> Formula:
        f = self.unary()
        if self.peek() == "U":
            self.take()
            return Until(f, self.until())
        return f

    def unary(self) -> Formula:
        tok = self.peek()
        pos = self.where()
        if tok == "!":
            self.take()
            return _negate(self.unary(), pos)
        if tok == "X":
            self.take()
            return Next(self.unary())
        if tok == "F":
            self.take()
            return Until(TRUE, self.unary())
        if tok == "(":
            self.take()
            f = self.disj()
            self.take(")")
            return f
        if tok == "true":
            self.take()
            return TRUE
        if tok is None or tok in _KEYWORDS or not re.fullmatch(r"[A-Za-z_]\w*", tok):
            raise FormulaError(f"expected an operand at position {pos}, got {tok!r}")
        self.take()
        if self.alphabet is not None and tok not in self.alphabet.ap:
            raise FormulaError(f"unknown atom {tok!r} at position {pos}; alphabet is {list(self.alphabet.ap)}")
        return Atom(tok)


def _is_atom_disjunction(f: Formula) -> bool:
    if isinstance(f, Atom):
        return True
    return isinstance(f, Or) and _is_atom_disjunction(f.left) and _is_atom_disjunction(f.right)


def _negate(f: Formula, pos: int) -> Formula:
    # negation normal form restricted to propositional subformulas
    if isinstance(f, Atom):
        return NegAtom(f.name)
    if isinstance(f, NegAtom):
        return Atom(f.name)
    if isinstance(f, And):
        return Or(_negate(f.left, pos), _negate(f.right, pos))
    if isinstance(f, Or):
        return And(_negate(f.left, pos), _negate(f.right, pos))
    raise FormulaError(f"negation at position {pos} applies to {f}, which is not propositional over atoms")


def parse(text: str, alphabet: Alphabet | Sequence[str] | None = None) -> Formula:
    """Parse ``text`` into a normalized formula.

    Grammar tokens: ``true``, identifiers, ``!``, ``&``, ``|``, ``X``, ``U``,
    ``F``, ``\\`` and parentheses.  ``a \\ b`` means ``a & !b`` and needs an
    atom or a disjunction of atoms on the right.
    """
    if alphabet is not None and not isinstance(alphabet, Alphabet):
        alphabet = Alphabet(tuple(alphabet))
    return _Parser(text, alphabet).parse()


# ---------------------------------------------------------------- semantics


def eval_word(f: Formula, word: Sequence[frozenset[str] | set[str]]) -> bool:
    """Finite-trace semantics by direct recursion over positions (test oracle)."""
    n = len(word)
    memo: dict[tuple[int, int], bool] = {}

    def holds(g: Formula, i: int) -> bool:
        key = (id(g), i)
        if key in memo:
            return memo[key]
        if isinstance(g, TrueF):
            r = True
        elif isinstance(g, Atom):
            r = i < n and g.name in word[i]
        elif isinstance(g, NegAtom):
            r = i < n and g.name not in word[i]
        elif isinstance(g, And):
            r = holds(g.left, i) and holds(g.right, i)
        elif isinstance(g, Or):
            r = holds(g.left, i) or holds(g.right, i)
        elif isinstance(g, Next):
            r = i + 1 < n and holds(g.arg, i + 1)
        elif isinstance(g, Eventually):
            r = any(holds(g.arg, j) for j in range(i, n))
        elif isinstance(g, Until):
            r = False
            for j in range(i, n):
                if holds(g.right, j):
                    r = True
                    break
                if not holds(g.left, j):
                    break
        else:
            raise TypeError(f"not a formula: {g!r}")
        memo[key] = r
        return r

    return holds(f, 0)


def eval_words(f: Formula, words: np.ndarray, alphabet: Alphabet) -> np.ndarray:
    """Batched ``eval_word`` for equal-length words given as symbol bitmasks.

    ``words`` has shape ``(m, n)``; returns a boolean vector of length ``m``.
    Each subformula becomes an ``(m, n + 1)`` truth table, the last column
    standing for the empty suffix.
    """
    words = np.asarray(words, dtype=np.int64)
    m, n = words.shape

    def table(g: Formula) -> np.ndarray:
        out = np.zeros((m, n + 1), dtype=bool)
        if isinstance(g, TrueF):
            out[:] = True
        elif isinstance(g, (Atom, NegAtom)):
            bit = (words >> alphabet.index(g.name)) & 1
            out[:, :n] = bit.astype(bool) if isinstance(g, Atom) else ~bit.astype(bool)
        elif isinstance(g, And):
            out = table(g.left) & table(g.right)
        elif isinstance(g, Or):
            out = table(g.left) | table(g.right)
        elif isinstance(g, Next):
            inner = table(g.arg)
            out[:, : n - 1] = inner[:, 1:n]
        elif isinstance(g, (Until, Eventually)):
            left = np.ones((m, n + 1), dtype=bool) if isinstance(g, Eventually) else table(g.left)
            right = table(g.arg if isinstance(g, Eventually) else g.right)
            for i in range(n - 1, -1, -1):
                out[:, i] = right[:, i] | (left[:, i] & out[:, i + 1])
        else:
            raise TypeError(f"not a formula: {g!r}")
        return out

    return table(f)[:, 0]


# ---------------------------------------------------------------- DFA


@dataclass(frozen=True)
class DFA:
    """Complete DFA over bitmask symbols; ``delta[q, symbol]`` is the successor."""

    ap: tuple[str, ...]
    delta: np.ndarray
    q0: int
    accepting: frozenset[int]
    sink: int | None = None

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.ap)

    def step(self, q: int, symbol: int) -> int:
        return int(self.delta[q, symbol])

    def run(self, word: Iterable[int], q: int | None = None) -> int:
        q = self.q0 if q is None else q
        for sym in word:
            q = int(self.delta[q, sym])
        return q

    def accepts(self, word: Iterable[int]) -> bool:
        return self.run(word) in self.accepting

    def accepts_many(self, words: np.ndarray) -> np.ndarray:
        words = np.asarray(words, dtype=np.int64)
        q = np.full(words.shape[0], self.q0, dtype=np.int64)
        for i in range(words.shape[1]):
            q = self.delta[q, words[:, i]]
        return np.isin(q, list(self.accepting))

    def to_json(self) -> dict:
        return {
            "ap": list(self.ap),
            "states": self.n_states,
            "q0": self.q0,
            "accepting": sorted(self.accepting),
            "sink": self.sink,
            "delta": [[q, s, int(self.delta[q, s])] for q in range(self.n_states) for s in range(self.delta.shape[1])],
        }

    @classmethod
    def from_json(cls, data: dict) -> DFA:
        ap = tuple(data["ap"])
        n = int(data["states"])
        delta = np.full((n, 1 << len(ap)), -1, dtype=np.int64)
        for q, s, q2 in data["delta"]:
            if delta[q, s] != -1 and delta[q, s] != q2:
                raise ValueError(f"nondeterministic entry for state {q}, symbol {s}")
            delta[q, s] = q2
        if (delta < 0).any():
            q, s = map(int, np.argwhere(delta < 0)[0])
            raise ValueError(f"transition table incomplete: state {q}, symbol {s} undefined")
        sink = data.get("sink")
        return cls(ap, delta, int(data["q0"]), frozenset(data["accepting"]), None if sink is None else int(sink))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> DFA:
        return cls.from_json(json.loads(Path(path).read_text()))


# Residual obligations are positive boolean combinations kept in DNF: a
# frozenset of clauses, each clause a frozenset of literals.  Literals are
# Atom, NegAtom, Next and Until nodes plus _LIVE ("another position exists").
_LIVE = Atom("\0live")
_DNF_TRUE: frozenset = frozenset([frozenset()])
_DNF_FALSE: frozenset = frozenset()


def _simplify(clauses: Iterable[frozenset]) -> frozenset:
    kept = []
    for c in clauses:
        if _LIVE in c and len(c) > 1:
            c = c - {_LIVE}
        pos = {l.name for l in c if isinstance(l, Atom)}
        if any(isinstance(l, NegAtom) and l.name in pos for l in c):
            continue
        kept.append(c)
    kept.sort(key=len)
    out: list[frozenset] = []
    for c in kept:
        if not any(d <= c for d in out):
            out.append(c)
    return frozenset(out)


def _dnf_and(a: frozenset, b: frozenset) -> frozenset:
    return _simplify(x | y for x in a for y in b)


def _dnf_or(a: frozenset, b: frozenset) -> frozenset:
    return _simplify(a | b)


def _dnf(f: Formula) -> frozenset:
    if isinstance(f, TrueF):
        return _DNF_TRUE
    if isinstance(f, And):
        return _dnf_and(_dnf(f.left), _dnf(f.right))
    if isinstance(f, Or):
        return _dnf_or(_dnf(f.left), _dnf(f.right))
    if isinstance(f, Eventually):
        return _dnf(Until(TRUE, f.arg))
    return frozenset([frozenset([f])])


class _Progressor:
    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet
        self.cache: dict = {}

    def literal(self, lit: Formula, symbol: int) -> frozenset:
        key = (lit, symbol)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if lit is _LIVE:
            r = _DNF_TRUE
        elif isinstance(lit, Atom):
            r = _DNF_TRUE if self.alphabet.holds(lit.name, symbol) else _DNF_FALSE
        elif isinstance(lit, NegAtom):
            r = _DNF_FALSE if self.alphabet.holds(lit.name, symbol) else _DNF_TRUE
        elif isinstance(lit, Next):
            r = _dnf_and(frozenset([frozenset([_LIVE])]), _dnf(lit.arg))
        elif isinstance(lit, Until):
            now = self.dnf(_dnf(lit.right), symbol)
            stay = _dnf_and(self.dnf(_dnf(lit.left), symbol), frozenset([frozenset([lit])]))
            r = _dnf_or(now, stay)
        else:
            raise TypeError(f"unexpected literal {lit!r}")
        self.cache[key] = r
        return r

    def dnf(self, clauses: frozenset, symbol: int) -> frozenset:
        acc = _DNF_FALSE
        for c in clauses:
            part = _DNF_TRUE
            for lit in c:
                part = _dnf_and(part, self.literal(lit, symbol))
                if not part:
                    break
            acc = _dnf_or(acc, part)
        return acc


def to_dfa(f: Formula, ap: Alphabet | Sequence[str] | None = None, max_states: int = 100_000) -> DFA:
    """Translate ``f`` by formula progression, then trim, add a sink and minimize.

    A state is the residual obligation after the prefix read so far; it is
    accepting when the residual is ``true`` (the empty continuation satisfies
    it).  States from which no accepting state is reachable collapse into a
    single sink.
    """
    f = normalize(f)
    if ap is None:
        ap = Alphabet(tuple(sorted(atoms_of(f))))
    elif not isinstance(ap, Alphabet):
        ap = Alphabet(tuple(ap))
    missing = atoms_of(f) - set(ap.ap)
    if missing:
        raise FormulaError(f"formula uses atoms {sorted(missing)} outside alphabet {list(ap.ap)}")

    prog = _Progressor(ap)
    start = _dnf(f)
    index = {start: 0}
    residuals = [start]
    rows: list[list[int]] = []
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        row = []
        for sym in ap.symbols():
            nxt = prog.dnf(cur, sym)
            if nxt not in index:
                if len(index) >= max_states:
                    raise StateBlowup(f"DFA construction exceeded {max_states} states for {f}")
                index[nxt] = len(residuals)
                residuals.append(nxt)
                queue.append(nxt)
            row.append(index[nxt])
        rows.append(row)
    delta = np.array(rows, dtype=np.int64).reshape(len(residuals), ap.size)
    accepting = np.array([r == _DNF_TRUE for r in residuals])
    return _finish(ap.ap, delta, 0, accepting)


def _coaccessible(delta: np.ndarray, accepting: np.ndarray) -> np.ndarray:
    n = delta.shape[0]
    preds: list[set[int]] = [set() for _ in range(n)]
    for q in range(n):
        for q2 in delta[q]:
            preds[int(q2)].add(q)
    seen = accepting.copy()
    queue = deque(np.flatnonzero(accepting).tolist())
    while queue:
        q = queue.popleft()
        for p in preds[q]:
            if not seen[p]:
                seen[p] = True
                queue.append(p)
    return seen


def _finish(ap: tuple[str, ...], delta: np.ndarray, q0: int, accepting: np.ndarray) -> DFA:
    n, k = delta.shape
    # Moore partition refinement; the dead states form one block
    live = _coaccessible(delta, accepting)
    block = np.where(accepting, 1, 0)
    block[~live] = 2
    while True:
        sig = {}
        new = np.empty(n, dtype=np.int64)
        for q in range(n):
            key = (int(block[q]), tuple(int(block[t]) for t in delta[q]))
            new[q] = sig.setdefault(key, len(sig))
        if len(sig) == len(set(block.tolist())):
            block = new
            break
        block = new

    # renumber blocks in BFS order from q0 (deterministic ids), sink last
    dead_block = int(block[np.flatnonzero(~live)[0]]) if (~live).any() else None
    order: dict[int, int] = {}
    queue = deque([int(block[q0])])
    rep = {}
    for q in range(n):
        rep.setdefault(int(block[q]), q)
    while queue:
        b = queue.popleft()
        if b in order or b == dead_block:
            continue
        order[b] = len(order)
        for t in delta[rep[b]]:
            if int(block[t]) not in order:
                queue.append(int(block[t]))
    sink = None
    if dead_block is not None:
        reachable_dead = any(int(block[t]) == dead_block for b in order for t in delta[rep[b]])
        if reachable_dead or int(block[q0]) == dead_block:
            sink = len(order)
            order[dead_block] = sink
    m = len(order)
    new_delta = np.empty((m, k), dtype=np.int64)
    acc = set()
    for b, i in order.items():
        new_delta[i] = [order[int(block[t])] for t in delta[rep[b]]]
        if accepting[rep[b]]:
            acc.add(i)
    return DFA(tuple(ap), new_delta, order[int(block[q0])], frozenset(acc), sink)


def words(alphabet_size: int, max_len: int) -> Iterable[tuple[int, ...]]:
    """All words over ``range(alphabet_size)`` of length ``0..max_len``."""
    frontier: list[tuple[int, ...]] = [()]
    yield ()
    for _ in range(max_len):
        frontier = [w + (s,) for w in frontier for s in range(alphabet_size)]
        yield from frontier


def translate(text: str, ap: Sequence[str], max_states: int = 100_000) -> DFA:
    alphabet = Alphabet(tuple(ap))
    return to_dfa(parse(text, alphabet), alphabet, max_states=max_states)
