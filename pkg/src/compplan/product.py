"""Product of a labeled MDP with a task DFA, option macro models and the four planners."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import LabeledMDP, ModelError, reaches_with_probability_one
from .options import OptionPolicy
from .scltl import DFA
from .solver import (
    ConvergenceError,
    NonAbsorbingError,
    ValueFunction,
    logsumexp,
    softmax,
    solve_chain,
)

log = logging.getLogger(__name__)

PLANNERS = ("optimal", "action", "option", "mixed")
TIE_TOL = 1e-10


@dataclass
class ProductModel:
    """Reachable part of ``MDP x DFA``.

    Product state ``x`` stands for the pair ``pairs[x] = (s, q)``.  Entering a
    state whose automaton component is accepting earns ``alpha``; accepting
    and sink states are absorbing.
    """

    mdp: LabeledMDP
    dfa: DFA
    pairs: np.ndarray  # (N, 2)
    index: np.ndarray  # (S, Q) -> product id or -1
    P: np.ndarray  # (N, A, N)
    accepting: np.ndarray
    sink: np.ndarray
    init: int
    alpha: float = 1.0

    @property
    def n_states(self) -> int:
        return len(self.pairs)

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def absorbing(self) -> np.ndarray:
        return self.accepting | self.sink

    @property
    def defined(self) -> np.ndarray:
        return self.P.sum(axis=2) > 0

    def reward(self, alpha: float | None = None) -> np.ndarray:
        """``R[x, a] = alpha * P(q' in F)``, zero on absorbing states."""
        alpha = self.alpha if alpha is None else alpha
        R = alpha * (self.P @ self.accepting.astype(float))
        R[self.absorbing] = 0.0
        return R

    def state(self, s: int, q: int) -> int:
        x = int(self.index[s, q])
        if x < 0:
            raise KeyError(f"product state ({s}, {q}) is not reachable")
        return x


def build_product(mdp: LabeledMDP, dfa: DFA, alpha: float = 1.0) -> ProductModel:
    """Reachable product from ``(s0, delta(q0, L(s0)))`` for every initial ``s0``."""
    if tuple(mdp.ap) != tuple(dfa.ap):
        raise ModelError(f"MDP alphabet {list(mdp.ap)} differs from DFA alphabet {list(dfa.ap)}")
    S, A = mdp.n_states, mdp.n_actions
    accepting_q = np.zeros(dfa.n_states, dtype=bool)
    accepting_q[list(dfa.accepting)] = True
    stop_q = accepting_q.copy()
    if dfa.sink is not None:
        stop_q[dfa.sink] = True

    index = -np.ones((S, dfa.n_states), dtype=np.int64)
    pairs: list[tuple[int, int]] = []
    queue = deque()

    def visit(s, q):
        if index[s, q] < 0:
            index[s, q] = len(pairs)
            pairs.append((s, q))
            queue.append((s, q))

    starts = np.flatnonzero(mdp.mu0)
    for s0 in starts:
        visit(int(s0), dfa.step(dfa.q0, int(mdp.labels[s0])))
    succ = [np.flatnonzero(mdp.P[s].sum(axis=0)) for s in range(S)]
    while queue:
        s, q = queue.popleft()
        if stop_q[q]:
            continue
        for t in succ[s]:
            visit(int(t), dfa.step(q, int(mdp.labels[t])))

    N = len(pairs)
    pairs_arr = np.array(pairs, dtype=np.int64).reshape(N, 2)
    P = np.zeros((N, A, N))
    for x, (s, q) in enumerate(pairs):
        if stop_q[q]:
            P[x, mdp.defined[s], x] = 1.0
            continue
        for t in succ[s]:
            y = index[t, dfa.step(q, int(mdp.labels[t]))]
            P[x, :, y] += mdp.P[s, :, t]
    s0 = mdp.initial_state
    init = int(index[s0, dfa.step(dfa.q0, int(mdp.labels[s0]))])
    sink = pairs_arr[:, 1] == dfa.sink if dfa.sink is not None else np.zeros(N, dtype=bool)
    return ProductModel(mdp, dfa, pairs_arr, index, P, accepting_q[pairs_arr[:, 1]], sink, init, alpha)


# ---------------------------------------------------------------- macro model


@dataclass
class MacroModel:
    """Multi-time model of every option at every product state.

    ``D[o, x, y]`` is the discounted probability ``sum_k gamma^k P(option o
    started at x ends at y after k steps)``; ``R[o, x]`` the expected
    discounted product reward collected on the way.  ``admissible[o, x]`` is
    False where the option would terminate immediately.
    """

    names: tuple[str, ...]
    D: np.ndarray  # (O, N, N)
    R: np.ndarray  # (O, N)
    admissible: np.ndarray  # (O, N)
    gamma: float

    @property
    def n_options(self) -> int:
        return len(self.names)


def option_chain(product: ProductModel, option: OptionPolicy) -> np.ndarray:
    """Product-level transition matrix of running ``option``'s policy."""
    pi = option.policy[product.pairs[:, 0]]
    return np.einsum("xa,xay->xy", pi, product.P)


def build_macro_model(product: ProductModel, options: Sequence[OptionPolicy], gamma: float = 0.9) -> MacroModel:
    N = product.n_states
    O = len(options)
    D = np.zeros((O, N, N))
    Rm = np.zeros((O, N))
    adm = np.zeros((O, N), dtype=bool)
    R = product.reward()
    q_of = product.pairs[:, 1]
    live = ~product.absorbing
    for k, opt in enumerate(options):
        if opt.policy.shape[0] != product.mdp.n_states:
            raise ModelError(f"option {opt.name!r} is not defined on the MDP states")
        M = option_chain(product, opt)
        r = np.einsum("xa,xa->x", opt.policy[product.pairs[:, 0]], R)
        term = opt.termination[product.pairs[:, 0]]
        running = live & ~term
        adm[k] = running & opt.initiation[product.pairs[:, 0]]
        for q in np.unique(q_of[running]):
            T = np.flatnonzero(running & (q_of == q))
            if gamma >= 1.0:
                _check_leaves(M, T, opt.name, product)
            A = np.eye(len(T)) - gamma * M[np.ix_(T, T)]
            exits = np.ones(N, dtype=bool)
            exits[T] = False
            rhs = np.concatenate([gamma * M[np.ix_(T, np.flatnonzero(exits))], r[T, None]], axis=1)
            sol = np.linalg.solve(A, rhs)
            D[k][np.ix_(T, np.flatnonzero(exits))] = sol[:, :-1]
            Rm[k, T] = sol[:, -1]
    return MacroModel(tuple(o.name for o in options), D, Rm, adm, gamma)


def _check_leaves(M: np.ndarray, T: np.ndarray, name: str, product: ProductModel) -> None:
    sub = M[np.ix_(T, T)]
    out = 1.0 - sub.sum(axis=1, keepdims=True)
    chain = np.block([[sub, out], [np.zeros((1, len(T))), np.ones((1, 1))]])
    target = np.zeros(len(T) + 1, dtype=bool)
    target[-1] = True
    ok = reaches_with_probability_one(chain, target)[:-1]
    if not ok.all():
        stuck = [tuple(int(v) for v in product.pairs[x]) for x in T[~ok][:10]]
        raise NonAbsorbingError(f"option {name!r} never terminates from product states (s, q) {stuck}")


# ---------------------------------------------------------------- planning


@dataclass
class PlanResult:
    """Values, the policy over ``A + O`` and the convergence trace of one planner."""

    kind: str
    operator: str
    values: np.ndarray
    policy: np.ndarray  # (N, A + O); columns A.. are options
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (iteration, V(init), residual)
    iterations: int = 0
    residual: float = 0.0

    def value_function(self, gamma: float, tau: float | None) -> ValueFunction:
        return ValueFunction(self.values, self.operator, gamma, tau, self.residual, self.iterations, [r for _, _, r in self.trace])


def _stacked_q(product: ProductModel, macro: MacroModel | None, V: np.ndarray, R: np.ndarray, gamma: float, use_a: bool, use_o: bool):
    N, A = product.n_states, product.n_actions
    O = macro.n_options if macro is not None else 0
    Q = np.full((N, A + O), -np.inf)
    if use_a:
        Q[:, :A] = np.where(product.defined, R + gamma * (product.P @ V), -np.inf)
    if use_o and O:
        Qo = macro.R + macro.D @ V  # (O, N)
        Q[:, A:] = np.where(macro.admissible, Qo, -np.inf).T
    return Q


def plan(
    product: ProductModel,
    kind: str,
    macro: MacroModel | None = None,
    gamma: float = 0.9,
    tau: float = 1.0,
    tol: float = 1e-3,
    max_iter: int = 100_000,
    operator: str | None = None,
) -> PlanResult:
    """Synchronous value iteration over the product.

    ``optimal`` is hardmax over actions; ``action``, ``option`` and
    ``mixed`` are softmax over actions, options, or both.  ``operator``
    overrides the default backup.
    """
    if kind not in PLANNERS:
        raise ValueError(f"unknown planner {kind!r}; choose from {PLANNERS}")
    use_a = kind in ("optimal", "action", "mixed")
    use_o = kind in ("option", "mixed")
    if use_o and macro is None:
        raise ValueError(f"planner {kind!r} needs a macro model")
    if use_o and abs(macro.gamma - gamma) > 1e-15:
        raise ValueError(f"macro model discount {macro.gamma} differs from planner discount {gamma}")
    op = operator or ("hardmax" if kind == "optimal" else "softmax")
    R = product.reward()
    V = np.zeros(product.n_states)
    trace = []
    for it in range(1, max_iter + 1):
        Q = _stacked_q(product, macro, V, R, gamma, use_a, use_o)
        has = np.isfinite(Q).any(axis=1) & ~product.absorbing
        if op == "hardmax":
            new = np.where(has, np.max(Q, axis=1), 0.0)
        elif op == "softmax":
            new = np.where(has, tau * logsumexp(Q / tau, axis=1), 0.0)
        else:
            raise ValueError(f"unknown operator {op!r}")
        res = float(np.max(np.abs(new - V)))
        V = new
        trace.append((it, float(V[product.init]), res))
        if res < tol:
            break
    else:
        raise ConvergenceError(f"{kind} planner did not reach tol={tol} in {max_iter} sweeps", res)
    Q = _stacked_q(product, macro, V, R, gamma, use_a, use_o)
    if op == "hardmax":
        pol = np.zeros_like(Q)
        rows = np.flatnonzero(np.isfinite(Q).any(axis=1))
        pol[rows, np.argmax(Q[rows], axis=1)] = 1.0
    else:
        pol = softmax(Q / tau, axis=1)
    _fill_absorbing(product, pol)
    return PlanResult(kind, op, V, pol, trace, it, res)


def _fill_absorbing(product: ProductModel, pol: np.ndarray) -> None:
    """Rows without any choice fall back to the uniform distribution over defined actions."""
    A = product.n_actions
    empty = pol.sum(axis=1) == 0
    d = product.defined[empty].astype(float)
    pol[empty, :A] = d / np.maximum(d.sum(axis=1, keepdims=True), 1.0)


# ---------------------------------------------------------------- evaluation


def induced_chain(
    product: ProductModel, policy: np.ndarray, macro: MacroModel | None, gamma: float, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Discounted kernel and expected reward of a policy over ``A + O``.

    Macro choices use the option's multi-time model, so the result is the
    exact value of committing to an option until it terminates.
    """
    A = product.n_actions
    R = product.reward(alpha)
    K = gamma * np.einsum("xa,xay->xy", policy[:, :A], product.P)
    r = np.einsum("xa,xa->x", policy[:, :A], R)
    if policy.shape[1] > A:
        if macro is None:
            raise ValueError("policy uses options but no macro model was given")
        if abs(macro.gamma - gamma) > 1e-15:
            raise ValueError(f"macro model discount {macro.gamma} differs from evaluation discount {gamma}")
        w = policy[:, A:].T  # (O, N)
        if (w[~macro.admissible] > 0).any():
            raise ModelError("policy selects an option where it is not admissible")
        K = K + np.einsum("ox,oxy->xy", w, macro.D)
        r = r + np.einsum("ox,ox->x", w, macro.R) * (alpha / product.alpha)
    return K, r


def evaluate_policy(
    product: ProductModel, policy: np.ndarray, macro: MacroModel | None = None, gamma: float = 0.9, alpha: float = 100.0
) -> np.ndarray:
    """Entropy-free expected discounted reward of a (hierarchical) policy."""
    K, r = induced_chain(product, policy, macro, gamma, alpha)
    # the kernel already carries the discount
    return solve_chain(K, r, 1.0, product.absorbing) if gamma >= 1.0 else _solve_discounted(K, r, product.absorbing)


def _solve_discounted(K: np.ndarray, r: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    V = np.zeros(len(r))
    idx = np.flatnonzero(~fixed)
    V[idx] = np.linalg.solve(np.eye(len(idx)) - K[np.ix_(idx, idx)], r[idx])
    return V


def satisfaction_probability(product: ProductModel, policy: np.ndarray, macro1: MacroModel | None = None) -> np.ndarray:
    """Probability of reaching an accepting product state, per product state.

    ``macro1`` must be the undiscounted (``gamma = 1``) macro model when the
    policy uses options.
    """
    K, r = induced_chain(product, policy, macro1, 1.0, 1.0)
    p = solve_chain(K, r, 1.0, product.absorbing)
    p[product.accepting] = 1.0
    return np.clip(p, 0.0, 1.0)


def max_satisfaction(product: ProductModel, tol: float = 1e-13, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Maximal reach probability of the accepting states and a policy attaining it.

    Undiscounted hardmax value iteration gives the values; the policy picks,
    among near-optimal actions, one that moves closer to the accepting set
    so that ties cannot trap it in a loop.  The returned probabilities are
    the exact values of that policy.
    """
    R = product.reward(1.0)
    P = product.P
    live = ~product.absorbing
    V = np.zeros(product.n_states)
    for _ in range(max_iter):
        Q = np.where(product.defined, R + P @ V, -np.inf)
        new = np.where(live, Q.max(axis=1), 0.0)
        res = np.max(np.abs(new - V))
        V = new
        if res < tol:
            break
    else:
        raise ConvergenceError("reach-probability iteration did not converge", float(res))
    Q = np.where(product.defined, R + P @ V, -np.inf)
    good = Q >= Q.max(axis=1, keepdims=True) - TIE_TOL
    pol = np.zeros((product.n_states, product.n_actions))
    done = product.accepting.copy()
    frontier = done.copy()
    while frontier.any():
        hits = (P @ done.astype(float)) > 0  # (N, A)
        cand = good & hits & live[:, None] & ~done[:, None]
        new_rows = np.flatnonzero(cand.any(axis=1))
        if len(new_rows) == 0:
            break
        pol[new_rows, np.argmax(cand[new_rows], axis=1)] = 1.0
        done[new_rows] = True
        frontier = np.zeros_like(done)
        frontier[new_rows] = True
    rest = np.flatnonzero(pol.sum(axis=1) == 0)
    if len(rest):
        first = np.argmax(np.where(product.defined[rest], Q[rest], -np.inf), axis=1)
        pol[rest, first] = 1.0
    # states left over cannot reach F with positive probability under the argmax ties
    p = satisfaction_probability(product, pol)
    return p, pol


# ---------------------------------------------------------------- simulation


def simulate_option(
    product: ProductModel, option: OptionPolicy, start: int, n: int, gamma: float, rng: np.random.Generator, max_steps: int = 100_000
) -> tuple[np.ndarray, np.ndarray]:
    """Roll ``option`` out ``n`` times from product state ``start``.

    Returns the product state each rollout ends in and its duration.
    """
    mdp = product.mdp
    s = np.full(n, product.pairs[start, 0])
    q0 = product.pairs[start, 1]
    q = np.full(n, q0)
    steps = np.zeros(n, dtype=np.int64)
    running = np.ones(n, dtype=bool)
    cum_pi = np.cumsum(option.policy, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for _ in range(max_steps):
        idx = np.flatnonzero(running)
        if len(idx) == 0:
            break
        cs = s[idx]
        a = _draw(cum_pi[cs], rng.random(len(idx)))
        t = _draw(cum_P[cs, a], rng.random(len(idx)))
        qn = product.dfa.delta[q[idx], mdp.labels[t]]
        s[idx] = t
        q[idx] = qn
        steps[idx] += 1
        running[idx] = (qn == q0) & ~option.termination[t]
    else:
        raise ConvergenceError(f"rollouts of {option.name!r} still running after {max_steps} steps", float(running.mean()))
    return product.index[s, q], steps


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    k = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(k, cum.shape[1] - 1)
