"""Primitive options and their GCD compositions (disjunction, conjunction, exclusion)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import LabeledMDP, ModelError, SSPTask, bind_task, ssp_from_sets
from .solver import ValueFunction, cross_q, evaluate_on_task, logsumexp, soft_q, softmax, softmax_vi
from .taskdecomp import CondReachTask

log = logging.getLogger(__name__)

ETA_OR = 10.0
ETA_AND = -10.0
EXCLUSION_EPS = 1e-12


@dataclass
class OptionPolicy:
    """Option ``<I, pi, beta>`` over the states of one MDP.

    ``termination`` is the support of beta (beta is 0/1 here).  ``value``
    holds the option's own value on its task: the soft value for primitive
    options, the exact policy value for compositions.
    """

    name: str
    policy: np.ndarray
    termination: np.ndarray
    goal: np.ndarray
    unsafe: np.ndarray
    initiation: np.ndarray | None = None
    value: np.ndarray | None = None
    q: np.ndarray | None = None
    provenance: tuple = ()
    solve_info: ValueFunction | None = None
    selection: np.ndarray | None = None  # option-level policy of a composition

    def __post_init__(self):
        if self.initiation is None:
            self.initiation = np.ones(self.policy.shape[0], dtype=bool)

    @property
    def n_states(self) -> int:
        return self.policy.shape[0]

    def beta(self, s: int) -> float:
        return float(self.termination[s])

    def with_termination(self, termination: np.ndarray) -> OptionPolicy:
        return replace(self, termination=np.asarray(termination, dtype=bool))

    def to_json(self, policy_csv: str | None = None, value_csv: str | None = None) -> dict:
        return {
            "name": self.name,
            "provenance": _jsonable(self.provenance),
            "termination": np.flatnonzero(self.termination).tolist(),
            "goal": np.flatnonzero(self.goal).tolist(),
            "unsafe": np.flatnonzero(self.unsafe).tolist(),
            "initiation": np.flatnonzero(self.initiation).tolist(),
            "policy_csv": policy_csv,
            "value_csv": value_csv,
        }


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    return x


@dataclass(frozen=True)
class CompositionSpec:
    op: str  # "or" | "and" | "minus"
    operands: tuple[str, ...]
    eta: float | None = None
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.op not in ("or", "and", "minus"):
            raise ValueError(f"unknown composition operator {self.op!r}")
        eta = self.resolved_eta
        if eta == 0 or not np.isfinite(eta):
            raise ValueError("andness must satisfy 0 < |eta| < inf")
        if self.op == "or" and eta < 0:
            raise ValueError("disjunction needs eta > 0")
        if self.op == "and" and eta > 0:
            raise ValueError("conjunction needs eta < 0")
        if len(self.operands) < 1 or (self.op == "minus" and len(self.operands) < 2):
            raise ValueError(f"not enough operands for {self.op}")

    @property
    def resolved_eta(self) -> float:
        if self.eta is not None:
            return float(self.eta)
        return ETA_AND if self.op == "and" else ETA_OR


# ---------------------------------------------------------------- primitives


def make_primitive_option(
    task: CondReachTask | SSPTask,
    mdp: LabeledMDP | None = None,
    gamma: float = 0.9,
    alpha: float = 100.0,
    tau: float = 1.0,
    tol: float = 1e-3,
    max_iter: int = 10_000,
    name: str | None = None,
) -> OptionPolicy:
    """Soft-optimal option for ``!unsafe U goal``; it terminates on goal or unsafe."""
    if isinstance(task, CondReachTask):
        if not task.primitive:
            log.warning("building an option for non-primitive task %s", task)
        ssp = bind_task(mdp, task, gamma, alpha, tau)
        provenance = ("task", str(task))
        name = name or task.goal_text()
    else:
        ssp = task
        provenance = ("task", ssp.name)
        name = name or ssp.name
    vf, pi = softmax_vi(ssp, tol=tol, max_iter=max_iter)
    return OptionPolicy(
        name=name,
        policy=pi,
        termination=ssp.absorbing.copy(),
        goal=ssp.goal.copy(),
        unsafe=ssp.unsafe.copy(),
        value=vf.values,
        q=soft_q(ssp, vf.values),
        provenance=provenance,
        solve_info=vf,
    )


# ---------------------------------------------------------------- GCD


def gcd_value(xs: Sequence[float] | np.ndarray, eta: float, weights: Sequence[float] | None = None, axis: int = -1):
    """``(1/eta) * log(sum_i W_i exp(eta x_i))``; +eta leans to max, -eta to min."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0 or xs.shape[axis] == 0:
        raise ValueError("gcd_value needs at least one input")
    if eta == 0 or not np.isfinite(eta):
        raise ValueError("andness must satisfy 0 < |eta| < inf")
    z = eta * xs
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        shape = [1] * xs.ndim
        shape[axis] = -1
        with np.errstate(divide="ignore"):
            z = z + np.log(w).reshape(shape)
    return logsumexp(z, axis=axis) / eta


def exclusion_q(q1: np.ndarray, q12: np.ndarray, eta: float, eps: float = EXCLUSION_EPS) -> np.ndarray:
    """Truth of ``phi1 \\ phi2`` from those of ``phi1`` and ``phi1 & phi2``.

    Inverts the disjunction ``phi1 = (phi1 & phi2) | (phi1 \\ phi2)``:
    ``(1/|eta|) log(exp(|eta| q1) - exp(|eta| q12))``, clamped at 0.
    """
    k = abs(eta)
    q1 = np.asarray(q1, dtype=float)
    q12 = np.asarray(q12, dtype=float)
    # factor out exp(k*q1) to keep the difference finite
    rel = 1.0 - np.exp(k * (q12 - q1))
    ok = rel * np.exp(k * q1) > eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q1 + np.log(np.where(ok, rel, 1.0)) / k
    return np.where(ok, np.maximum(out, 0.0), 0.0)


def option_selection(tables: np.ndarray, eta: float, literal: bool = False) -> np.ndarray:
    """Option policy from truth tables ``tables[i, s, j] = Q_i(s, o_j)``.

    Softmax of the GCD value ``lambda_j`` at temperature ``1/|eta|``, i.e.
    ``pi(s)[j]`` proportional to ``(sum_i exp(eta * Q_i(s, o_j))) ** sign(eta)``.
    For ``eta > 0`` this is ``sum_i exp(eta Q_i)`` normalized; ``literal``
    uses that expression for ``eta < 0`` too.
    """
    scores = logsumexp(eta * tables, axis=0)  # (S, n) = eta * lambda_j
    if not literal:
        scores = np.sign(eta) * scores
    return softmax(scores, axis=1)


# ---------------------------------------------------------------- composition


def composite_sets(op: str, operands: Sequence[OptionPolicy]) -> tuple[np.ndarray, np.ndarray]:
    """(goal, termination) of a composition; all operands must share one unsafe set."""
    unsafe = operands[0].unsafe
    for o in operands[1:]:
        if not np.array_equal(o.unsafe, unsafe):
            raise ModelError(f"operands {operands[0].name!r} and {o.name!r} have different unsafe sets")
    goals = [o.goal for o in operands]
    if op == "or":
        goal = np.logical_or.reduce(goals)
    elif op == "and":
        goal = np.logical_and.reduce(goals)
    else:
        goal = goals[0] & ~np.logical_or.reduce(goals[1:])
    return goal, goal | unsafe


def truth_tables(
    tasks: Sequence[SSPTask], operands: Sequence[OptionPolicy], stop: np.ndarray, alpha: float
) -> np.ndarray:
    """``T[i, s, j]``: level of truth of task ``i`` when option ``j`` runs from ``s``.

    1 on task ``i``'s goal, 0 on unsafe, otherwise the discounted reach
    probability of option ``j`` (run until ``stop``) scaled into [0, 1].
    """
    S = operands[0].n_states
    T = np.zeros((len(tasks), S, len(operands)))
    for i, task in enumerate(tasks):
        for j, o in enumerate(operands):
            q = cross_q(task, o.with_termination(stop)) / alpha
            T[i, :, j] = np.where(task.goal, 1.0, np.where(task.unsafe, 0.0, q))
    return T


def compose(
    spec: CompositionSpec,
    operands: Sequence[OptionPolicy],
    mdp: LabeledMDP,
    gamma: float = 0.9,
    alpha: float = 100.0,
    tau: float = 1.0,
    tables: np.ndarray | None = None,
    name: str | None = None,
    literal: bool = False,
) -> OptionPolicy:
    """Compose operand options into one Markov option.

    The option-level policy is a softmax over the operands of their GCD
    truth value (``minus`` uses the exclusion truth table with ``|eta|``);
    the low-level policy mixes the operands' action distributions with
    those weights, re-selected at every state.  ``tables[i, s, j]`` are
    truth levels in [0, 1]; they are computed when not given.
    """
    operands = list(operands)
    if len(operands) != len(spec.operands):
        raise ValueError(f"{spec.op} composition names {len(spec.operands)} operands, got {len(operands)}")
    eta = spec.resolved_eta
    goal, term = composite_sets(spec.op, operands)
    unsafe = operands[0].unsafe
    if spec.op == "and" and not goal.any():
        log.warning("conjunction %s has an empty goal intersection; the composed option may alternate forever", spec.operands)
    op_tasks = [ssp_from_sets(mdp, o.goal & ~unsafe, unsafe, gamma, alpha, tau, o.name) for o in operands]

    if spec.op in ("or", "and"):
        if tables is None:
            tables = truth_tables(op_tasks, operands, term, alpha)
        if spec.weights is not None:
            w = np.log(np.asarray(spec.weights, dtype=float))[:, None, None]
            scores = logsumexp(eta * tables + w, axis=0)
            selection = softmax(scores if literal else np.sign(eta) * scores, axis=1)
        else:
            selection = option_selection(tables, eta, literal)
    else:
        both = operands[0].goal & np.logical_or.reduce([o.goal for o in operands[1:]])
        if tables is None:
            first = truth_tables(op_tasks[:1], operands, term, alpha)[0]
            joint_task = ssp_from_sets(mdp, both, unsafe, gamma, alpha, tau, "joint")
            joint = truth_tables([joint_task], operands, term | both, alpha)[0]
            tables = np.stack([first, joint])
        excl = exclusion_q(tables[0], tables[1], eta)
        selection = softmax(abs(eta) * excl, axis=1)

    policy = np.einsum("sj,jsa->sa", selection, np.stack([o.policy for o in operands]))
    comp_task = ssp_from_sets(mdp, goal, unsafe, gamma, alpha, tau, name or spec.op)
    value = evaluate_on_task(comp_task, policy, term)
    label = name or _comp_name(spec, operands)
    return OptionPolicy(
        name=label,
        policy=policy,
        termination=term,
        goal=goal,
        unsafe=unsafe.copy(),
        value=value,
        provenance=("compose", spec.op, tuple(o.name for o in operands), eta),
        selection=selection,
    )


def _comp_name(spec: CompositionSpec, operands) -> str:
    names = [o.name for o in operands]
    if spec.op == "minus":
        return f"{names[0]} \\ " + (names[1] if len(names) == 2 else "(" + " | ".join(names[1:]) + ")")
    return f" {'|' if spec.op == 'or' else '&'} ".join(names)


def direct_option(
    mdp: LabeledMDP,
    goal: np.ndarray,
    unsafe: np.ndarray,
    gamma: float = 0.9,
    alpha: float = 100.0,
    tau: float = 1.0,
    tol: float = 1e-3,
    name: str = "direct",
) -> OptionPolicy:
    """Soft-optimal option synthesized from scratch for an arbitrary goal set."""
    return make_primitive_option(ssp_from_sets(mdp, goal, unsafe, gamma, alpha, tau, name), tol=tol, name=name)


# ---------------------------------------------------------------- libraries


def primitive_library(
    mdp: LabeledMDP, tasks: Sequence[CondReachTask], gamma: float, alpha: float, tau: float, tol: float = 1e-3
) -> dict[tuple, OptionPolicy]:
    """One option per distinct primitive task, keyed by (atom, unsafe symbols)."""
    lib = {}
    for t in tasks:
        key = (t.atom, t.unsafe)
        if key not in lib:
            lib[key] = make_primitive_option(t, mdp, gamma, alpha, tau, tol)
    return lib


def composite_option(
    task: CondReachTask,
    library: dict[tuple, OptionPolicy],
    mdp: LabeledMDP,
    gamma: float,
    alpha: float,
    tau: float,
    eta_or: float = ETA_OR,
    eta_and: float = ETA_AND,
) -> OptionPolicy:
    """Build the GCD composition recorded for a pruned task."""
    expr = task.expr
    if expr[0] in ("or", "and"):
        atoms = list(expr[1])
        spec = CompositionSpec(expr[0], tuple(atoms), eta_or if expr[0] == "or" else eta_and)
    elif expr[0] == "minus":
        atoms = [expr[1], *expr[2]]
        spec = CompositionSpec("minus", tuple(atoms), abs(eta_or))
    else:
        raise ValueError(f"task {task} is primitive")
    try:
        operands = [library[(a, task.unsafe)] for a in atoms]
    except KeyError as e:
        raise ModelError(f"no primitive option for atom {e.args[0][0]!r} with the unsafe set of {task}") from None
    return compose(spec, operands, mdp, gamma, alpha, tau, name=task.goal_text())


def save_options(options: Sequence[OptionPolicy], outdir: str | Path) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for k, o in enumerate(options):
        pol = f"option{k}_policy.csv"
        val = f"option{k}_value.csv"
        with open(out / pol, "w") as fh:
            fh.write("state,action,prob\n")
            for s, a in zip(*np.nonzero(o.policy)):
                fh.write(f"{s},{a},{o.policy[s, a]:.12g}\n")
        with open(out / val, "w") as fh:
            fh.write("state,value\n")
            values = o.value if o.value is not None else np.zeros(o.n_states)
            for s, v in enumerate(values):
                fh.write(f"{s},{v:.12g}\n")
        index.append(o.to_json(pol, val))
    (out / "options.json").write_text(json.dumps({"options": index}, indent=1))


def load_options(indir: str | Path, n_states: int, n_actions: int) -> list[OptionPolicy]:
    d = Path(indir)
    meta = json.loads((d / "options.json").read_text())["options"]
    out = []
    for m in meta:
        pi = np.zeros((n_states, n_actions))
        with open(d / m["policy_csv"]) as fh:
            next(fh)
            for line in fh:
                s, a, p = line.strip().split(",")
                pi[int(s), int(a)] = float(p)
        V = np.zeros(n_states)
        with open(d / m["value_csv"]) as fh:
            next(fh)
            for line in fh:
                s, v = line.strip().split(",")
                V[int(s)] = float(v)

        def mask(idx):
            x = np.zeros(n_states, dtype=bool)
            x[idx] = True
            return x

        out.append(
            OptionPolicy(
                name=m["name"],
                policy=pi,
                termination=mask(m["termination"]),
                goal=mask(m["goal"]),
                unsafe=mask(m["unsafe"]),
                initiation=mask(m["initiation"]),
                value=V,
                provenance=tuple(m["provenance"]) if m["provenance"] else (),
            )
        )
    return out
