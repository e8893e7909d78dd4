"""Labeled MDPs, the slippery grid world, and binding reachability tasks to SSP models."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scltl import Alphabet
from .taskdecomp import CondReachTask

log = logging.getLogger(__name__)

ROW_TOL = 1e-12
ACTIONS = ("Up", "Down", "Left", "Right")
_MOVES = {"Up": (0, -1), "Down": (0, 1), "Left": (-1, 0), "Right": (1, 0)}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledMDP:
    """Finite MDP with labels over ``ap``.

    ``P[s, a, s']`` is dense; a row summing to zero marks an action that is
    undefined at ``s``.  ``labels[s]`` is the symbol bitmask of ``s``.
    """

    ap: tuple[str, ...]
    actions: tuple[str, ...]
    P: np.ndarray
    mu0: np.ndarray
    labels: np.ndarray
    grid: tuple[int, int] | None = None  # (width, height) when built from a grid

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or A != len(self.actions):
            raise ModelError(f"transition tensor has shape {self.P.shape} for {len(self.actions)} actions")
        sums = self.P.sum(axis=2)
        bad = ~(np.isclose(sums, 1.0, rtol=0, atol=ROW_TOL) | (sums == 0))
        if bad.any():
            s, a = map(int, np.argwhere(bad)[0])
            raise ModelError(f"row (state {s}, action {self.actions[a]}) sums to {sums[s, a]!r}, not 0 or 1")
        if (self.P < 0).any():
            raise ModelError("negative transition probability")
        if self.mu0.shape != (S,) or not np.isclose(self.mu0.sum(), 1.0, atol=ROW_TOL) or (self.mu0 < 0).any():
            raise ModelError("initial distribution must be a probability vector over states")
        if self.labels.shape != (S,) or (self.labels < 0).any() or (self.labels >= 1 << len(self.ap)).any():
            raise ModelError("labels must be one bitmask per state within the alphabet")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def alphabet(self) -> Alphabet:
        return Alphabet(self.ap)

    @property
    def defined(self) -> np.ndarray:
        return self.P.sum(axis=2) > 0

    @property
    def initial_state(self) -> int:
        return int(np.argmax(self.mu0))

    def label_symbols(self) -> frozenset[int]:
        return frozenset(int(x) for x in np.unique(self.labels))

    def states_with(self, symbols) -> np.ndarray:
        return np.isin(self.labels, sorted(symbols))

    def cell(self, s: int) -> tuple[int, int]:
        w = self.grid[0]
        return s % w, s // w

    def state_of(self, col: int, row: int) -> int:
        return row * self.grid[0] + col

    # ---- serialization

    def to_json(self) -> dict:
        S, A, _ = self.P.shape
        trans = [
            [int(s), int(a), int(t), float(self.P[s, a, t])] for s, a, t in zip(*np.nonzero(self.P))
        ]
        d = {
            "ap": list(self.ap),
            "states": S,
            "actions": list(self.actions),
            "mu0": [[int(s), float(self.mu0[s])] for s in np.flatnonzero(self.mu0)],
            "labels": [[s, int(self.labels[s])] for s in range(S)],
            "trans": trans,
        }
        if self.grid is not None:
            d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, d: dict) -> LabeledMDP:
        for key in ("ap", "states", "actions", "mu0", "labels", "trans"):
            if key not in d:
                raise ModelError(f"missing field {key!r}")
        ap = tuple(d["ap"])
        S = int(d["states"])
        actions = tuple(d["actions"])
        P = np.zeros((S, len(actions), S))
        for i, row in enumerate(d["trans"]):
            try:
                s, a, t, p = row
            except (TypeError, ValueError):
                raise ModelError(f"trans[{i}] must be [s, a, s', p], got {row!r}") from None
            if isinstance(a, str):
                if a not in actions:
                    raise ModelError(f"trans[{i}]: unknown action {a!r}")
                a = actions.index(a)
            if not (0 <= s < S and 0 <= t < S and 0 <= a < len(actions)):
                raise ModelError(f"trans[{i}]: index out of range in {row!r}")
            P[s, a, t] += p
        mu0 = np.zeros(S)
        for s, p in d["mu0"]:
            mu0[int(s)] += p
        alpha = Alphabet(ap)
        labels = np.zeros(S, dtype=np.int64)
        for i, (s, lab) in enumerate(d["labels"]):
            if isinstance(lab, (list, tuple)):
                try:
                    lab = alpha.encode(lab)
                except ValueError as e:
                    raise ModelError(f"labels[{i}]: {e}") from None
            elif not 0 <= int(lab) < alpha.size:
                raise ModelError(f"labels[{i}]: bitmask {lab} outside alphabet {list(ap)}")
            labels[int(s)] = int(lab)
        grid = tuple(d["grid"]) if d.get("grid") else None
        return cls(ap, actions, P, mu0, labels, grid)


def save_mdp(mdp: LabeledMDP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_json()))


def load_mdp(path: str | Path) -> LabeledMDP:
    return LabeledMDP.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- grid world


@dataclass(frozen=True)
class GridWorldSpec:
    """Grid layout; cells are ``(col, row)`` with the origin at the top left."""

    width: int
    height: int
    obstacles: tuple[tuple[int, int], ...] = ()
    regions: dict[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    slip: float = 0.7
    s0: tuple[int, int] = (0, 0)
    obstacle_label: str = "C"
    region_prefix: str = "s"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ModelError(f"degenerate grid {self.width}x{self.height}")
        if not 0 < self.slip <= 1:
            raise ModelError(f"intended-move probability must be in (0, 1], got {self.slip}")
        cells = list(self.obstacles) + [c for cs in self.regions.values() for c in cs] + [self.s0]
        for c in cells:
            if not (0 <= c[0] < self.width and 0 <= c[1] < self.height):
                raise ModelError(f"cell {tuple(c)} outside the {self.width}x{self.height} grid")

    @property
    def ap(self) -> tuple[str, ...]:
        return tuple(self.region_prefix + k for k in sorted(self.regions)) + (self.obstacle_label,)

    @classmethod
    def from_json(cls, d: dict) -> GridWorldSpec:
        for key in ("width", "height"):
            if key not in d:
                raise ModelError(f"grid spec missing {key!r}")
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            obstacles=tuple(tuple(c) for c in d.get("obstacles", [])),
            regions={str(k): tuple(tuple(c) for c in v) for k, v in d.get("labels", {}).items()},
            slip=float(d.get("slip", 0.7)),
            s0=tuple(d.get("s0", (0, 0))),
            obstacle_label=d.get("obstacle_label", "C"),
            region_prefix=d.get("region_prefix", "s"),
        )

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "slip": self.slip,
            "obstacles": [list(c) for c in self.obstacles],
            "labels": {k: [list(c) for c in v] for k, v in sorted(self.regions.items())},
            "s0": list(self.s0),
            "obstacle_label": self.obstacle_label,
            "region_prefix": self.region_prefix,
        }


def load_grid_spec(path: str | Path) -> GridWorldSpec:
    return GridWorldSpec.from_json(json.loads(Path(path).read_text()))


def bundled_grid_path() -> Path:
    return Path(__file__).with_name("data") / "gridworld_6x8.json"


def grid_transition_row(width: int, height: int, col: int, row: int, action: str, slip: float) -> dict:
    """Successor distribution of one grid cell under one action.

    The outcome set is the cell itself, its in-grid neighbours and the
    intended target (even when it lies off the grid).  The intended target
    gets ``slip``, every other outcome ``(1 - slip) / (n - 1)``; mass on an
    off-grid target stays put.
    """
    dx, dy = _MOVES[action]
    target = (col + dx, row + dy)
    outcomes = [(col, row)]
    for mx, my in _MOVES.values():
        c = (col + mx, row + my)
        if 0 <= c[0] < width and 0 <= c[1] < height:
            outcomes.append(c)
    if target not in outcomes:
        outcomes.append(target)
    others = len(outcomes) - 1
    out: dict[tuple[int, int], float] = {}
    for c in outcomes:
        p = slip if c == target else (1 - slip) / others
        if not (0 <= c[0] < width and 0 <= c[1] < height):
            c = (col, row)
        if p:
            out[c] = out.get(c, 0.0) + p
    return out


def build_gridworld(spec: GridWorldSpec) -> LabeledMDP:
    W, H = spec.width, spec.height
    S = W * H
    P = np.zeros((S, len(ACTIONS), S))
    for row in range(H):
        for col in range(W):
            s = row * W + col
            for a, name in enumerate(ACTIONS):
                for (c, r), p in grid_transition_row(W, H, col, row, name, spec.slip).items():
                    P[s, a, r * W + c] += p
    alpha = Alphabet(spec.ap)
    labels = np.zeros(S, dtype=np.int64)
    for c, r in spec.obstacles:
        labels[r * W + c] |= 1 << alpha.index(spec.obstacle_label)
    for k, cells in spec.regions.items():
        bit = 1 << alpha.index(spec.region_prefix + k)
        for c, r in cells:
            labels[r * W + c] |= bit
    mu0 = np.zeros(S)
    mu0[spec.s0[1] * W + spec.s0[0]] = 1.0
    return LabeledMDP(spec.ap, ACTIONS, P, mu0, labels, (W, H))


# ---------------------------------------------------------------- SSP tasks


@dataclass(frozen=True)
class SSPTask:
    """Reach ``goal`` avoiding ``unsafe``; both absorbing, reward ``alpha`` on entering goal."""

    mdp: LabeledMDP
    goal: np.ndarray
    unsafe: np.ndarray
    P: np.ndarray
    R: np.ndarray
    gamma: float
    alpha: float
    tau: float
    name: str = ""

    @property
    def absorbing(self) -> np.ndarray:
        return self.goal | self.unsafe

    @property
    def n_states(self) -> int:
        return self.P.shape[0]


def ssp_from_sets(
    mdp: LabeledMDP,
    goal: np.ndarray,
    unsafe: np.ndarray,
    gamma: float = 0.9,
    alpha: float = 100.0,
    tau: float = 1.0,
    name: str = "",
) -> SSPTask:
    goal = np.asarray(goal, dtype=bool)
    unsafe = np.asarray(unsafe, dtype=bool)
    if (goal & unsafe).any():
        s = int(np.flatnonzero(goal & unsafe)[0])
        raise ModelError(f"goal and unsafe sets overlap (e.g. state {s}) for task {name!r}")
    if not goal.any():
        log.warning("task %r has an empty goal set; its value is identically zero", name)
    absorbing = goal | unsafe
    P = mdp.P.copy()
    P[absorbing] = 0.0
    idx = np.flatnonzero(absorbing)
    P[idx, :, idx] = 1.0
    P[absorbing] *= mdp.defined[absorbing][:, :, None]  # keep undefined actions undefined
    R = alpha * (P @ goal.astype(float))
    R[absorbing] = 0.0
    return SSPTask(mdp, goal, unsafe, P, R, gamma, alpha, tau, name)


def bind_task(mdp: LabeledMDP, task: CondReachTask, gamma: float = 0.9, alpha: float = 100.0, tau: float = 1.0) -> SSPTask:
    """SSP model of ``!unsafe U goal`` on ``mdp`` via the label denotations."""
    if tuple(task.ap) != tuple(mdp.ap):
        raise ModelError(f"task alphabet {task.ap} differs from MDP alphabet {mdp.ap}")
    unsafe = mdp.states_with(task.unsafe)
    goal = mdp.states_with(task.goal)
    return ssp_from_sets(mdp, goal, unsafe, gamma, alpha, tau, str(task))


def reaches_with_probability_one(P_pi: np.ndarray, target: np.ndarray) -> np.ndarray:
    """States of the chain ``P_pi`` that hit ``target`` almost surely.

    Graph analysis: a state fails iff it can reach a state that cannot
    reach ``target``.
    """
    n = P_pi.shape[0]
    succ = P_pi > 0
    can = target.copy()
    queue = deque(np.flatnonzero(target).tolist())
    pred = [np.flatnonzero(succ[:, j]) for j in range(n)]
    while queue:
        j = queue.popleft()
        for i in pred[j]:
            if not can[i] and not target[i]:
                can[i] = True
                queue.append(i)
    bad = ~can
    doomed = bad.copy()
    queue = deque(np.flatnonzero(bad).tolist())
    while queue:
        j = queue.popleft()
        for i in pred[j]:
            if not doomed[i] and not target[i]:
                doomed[i] = True
                queue.append(i)
    return ~doomed


def check_absorbing(task: SSPTask, policy: np.ndarray) -> np.ndarray:
    """Which states reach goal or unsafe with probability one under ``policy``."""
    P_pi = np.einsum("sa,sat->st", policy, task.P)
    return reaches_with_probability_one(P_pi, task.absorbing)


def grid_matrix(mdp: LabeledMDP, values: np.ndarray) -> np.ndarray:
    W, H = mdp.grid
    return np.asarray(values, dtype=float).reshape(H, W)


def spec_from_cells(
    width: int, height: int, obstacles: Sequence, regions: dict, s0=(0, 0), slip: float = 0.7
) -> GridWorldSpec:
    return GridWorldSpec(
        width, height, tuple(map(tuple, obstacles)), {k: tuple(map(tuple, v)) for k, v in regions.items()}, slip, tuple(s0)
    )
