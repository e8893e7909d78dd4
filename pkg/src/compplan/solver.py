"""Soft and hard value iteration, exact policy evaluation, cross-task Q tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mdp import SSPTask, reaches_with_probability_one

DENSE_LIMIT = 5000


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


class NonAbsorbingError(RuntimeError):
    pass


@dataclass
class ValueFunction:
    values: np.ndarray
    operator: str
    gamma: float
    tau: float | None = None
    residual: float = 0.0
    iterations: int = 0
    residuals: list[float] = field(default_factory=list)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp; rows of all ``-inf`` give ``-inf``."""
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def q_values(P: np.ndarray, R: np.ndarray, V: np.ndarray, gamma: float, defined: np.ndarray | None = None) -> np.ndarray:
    Q = R + gamma * (P @ V)
    if defined is not None:
        Q = np.where(defined, Q, -np.inf)
    return Q


def _uniform(defined: np.ndarray) -> np.ndarray:
    d = defined.astype(float)
    z = d.sum(axis=1, keepdims=True)
    return np.divide(d, z, out=np.zeros_like(d), where=z > 0)


def value_iteration(
    P: np.ndarray,
    R: np.ndarray,
    absorbing: np.ndarray,
    gamma: float,
    operator: str = "softmax",
    tau: float = 1.0,
    tol: float = 1e-3,
    max_iter: int = 10_000,
    V0: np.ndarray | None = None,
) -> tuple[ValueFunction, np.ndarray]:
    """Synchronous value iteration; absorbing states stay pinned at 0.

    Returns the value function and the Q table of the last backup.
    """
    defined = P.sum(axis=2) > 0
    active = ~absorbing & defined.any(axis=1)
    V = np.zeros(P.shape[0]) if V0 is None else np.array(V0, dtype=float)
    V[~active] = 0.0
    residuals = []
    for it in range(1, max_iter + 1):
        Q = q_values(P, R, V, gamma, defined)
        if operator == "softmax":
            new = tau * logsumexp(Q / tau, axis=1)
        elif operator == "hardmax":
            new = Q.max(axis=1)
        else:
            raise ValueError(f"unknown operator {operator!r}")
        new = np.where(active, new, 0.0)
        res = float(np.max(np.abs(new - V))) if len(V) else 0.0
        residuals.append(res)
        V = new
        if res < tol:
            Q = q_values(P, R, V, gamma, defined)
            return ValueFunction(V, operator, gamma, tau if operator == "softmax" else None, res, it, residuals), Q
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} sweeps (residual {res:.3g})", res)


def boltzmann(Q: np.ndarray, tau: float, absorbing: np.ndarray | None = None) -> np.ndarray:
    """``exp((Q - V) / tau)`` with ``V = tau * logsumexp(Q / tau)``."""
    pi = softmax(Q / tau, axis=1)
    if absorbing is not None:
        pi[absorbing] = _uniform(np.isfinite(Q[absorbing]))
    return pi


def greedy(Q: np.ndarray, absorbing: np.ndarray | None = None) -> np.ndarray:
    pi = np.zeros_like(Q)
    pi[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0  # first maximiser = lowest action id
    if absorbing is not None:
        pi[absorbing] = _uniform(np.isfinite(Q[absorbing]))
    return pi


def softmax_vi(task: SSPTask, tol: float = 1e-3, max_iter: int = 10_000) -> tuple[ValueFunction, np.ndarray]:
    if not task.goal.any():
        # nothing to reach: the entropy bonus alone would make V positive
        return ValueFunction(np.zeros(task.n_states), "softmax", task.gamma, task.tau), _uniform(task.P.sum(axis=2) > 0)
    vf, Q = value_iteration(task.P, task.R, task.absorbing, task.gamma, "softmax", task.tau, tol, max_iter)
    return vf, boltzmann(Q, task.tau, task.absorbing)


def hardmax_vi(task: SSPTask, tol: float = 1e-3, max_iter: int = 10_000) -> tuple[ValueFunction, np.ndarray]:
    vf, Q = value_iteration(task.P, task.R, task.absorbing, task.gamma, "hardmax", None, tol, max_iter)
    return vf, greedy(Q, task.absorbing)


def soft_q(task: SSPTask, V: np.ndarray) -> np.ndarray:
    return q_values(task.P, task.R, np.asarray(V), task.gamma, task.P.sum(axis=2) > 0)


# ---------------------------------------------------------------- linear solves


def solve_chain(P_pi: np.ndarray, r_pi: np.ndarray, gamma: float, fixed: np.ndarray | None = None) -> np.ndarray:
    """Solve ``V = r + gamma * P V`` with ``V = 0`` on ``fixed`` states.

    For ``gamma == 1`` states that cannot reach a rewarding transition get
    value 0; the rest must leave the free set with probability one, or
    :class:`NonAbsorbingError` is raised.
    """
    n = P_pi.shape[0]
    fixed = np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    free = ~fixed
    V = np.zeros(n)
    if gamma >= 1.0:
        # states with no path to a rewarding transition are worth nothing
        rewarding = (r_pi != 0) & free
        succ = sp.csr_matrix(P_pi > 0)
        can = rewarding.copy()
        frontier = rewarding.copy()
        while frontier.any():
            new = (succ @ frontier.astype(float) > 0) & free & ~can
            can |= new
            frontier = new
        free = free & can
        if free.any():
            sub = P_pi[np.ix_(free, free)]
            leave = reaches_with_probability_one(
                np.block([[sub, 1 - sub.sum(axis=1, keepdims=True)], [np.zeros((1, sub.shape[0])), np.ones((1, 1))]]),
                np.r_[np.zeros(sub.shape[0], dtype=bool), True],
            )[:-1]
            if not leave.all():
                stuck = np.flatnonzero(free)[~leave]
                raise NonAbsorbingError(f"chain is not absorbing with gamma=1; recurrent states include {stuck[:10].tolist()}")
    idx = np.flatnonzero(free)
    if len(idx) == 0:
        return V
    A = P_pi[np.ix_(idx, idx)]
    b = r_pi[idx]
    if len(idx) < DENSE_LIMIT:
        V[idx] = np.linalg.solve(np.eye(len(idx)) - gamma * A, b)
    else:
        M = sp.identity(len(idx), format="csc") - gamma * sp.csc_matrix(A)
        V[idx] = spla.spsolve(M, b)
    return V


def policy_eval(
    P: np.ndarray, R: np.ndarray, policy: np.ndarray, gamma: float, absorbing: np.ndarray | None = None
) -> ValueFunction:
    """Exact value of a Markov policy (entropy-free)."""
    P_pi = np.einsum("sa,sat->st", policy, P)
    r_pi = np.einsum("sa,sa->s", policy, np.where(np.isfinite(R), R, 0.0))
    V = solve_chain(P_pi, r_pi, gamma, absorbing)
    return ValueFunction(V, "evaluation", gamma)


def evaluate_on_task(task: SSPTask, policy: np.ndarray, stop: np.ndarray | None = None) -> np.ndarray:
    """Value of ``policy`` for ``task``; the run also ends on ``stop`` states."""
    # pinned states drop out of the linear system, so their rows never matter
    absorbing = task.absorbing if stop is None else task.absorbing | stop
    return policy_eval(task.P, task.R, policy, task.gamma, absorbing).values


def soft_policy_value(task: SSPTask, policy: np.ndarray) -> np.ndarray:
    """Entropy-regularized value of ``policy``: reward minus ``tau * log pi`` per step."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(policy > 0, policy * np.log(policy), 0.0).sum(axis=1)
    P_pi = np.einsum("sa,sat->st", policy, task.P)
    r_pi = np.einsum("sa,sa->s", policy, task.R) + task.tau * ent
    return solve_chain(P_pi, r_pi, task.gamma, task.absorbing)


def cross_q(task_i: SSPTask, option_j, stop: np.ndarray | None = None) -> np.ndarray:
    """``Q_i(s, o_j)``: run option ``j``'s policy and score it against task ``i``.

    The run ends on task ``i``'s goal or unsafe states, on option ``j``'s
    termination set and on any extra ``stop`` states.
    """
    if option_j.policy.shape[0] != task_i.n_states:
        raise ValueError(
            f"option {option_j.name!r} covers {option_j.policy.shape[0]} states, task has {task_i.n_states}"
        )
    end = option_j.termination.copy()
    if stop is not None:
        end |= stop
    return evaluate_on_task(task_i, option_j.policy, end)
