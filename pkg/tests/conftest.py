from __future__ import annotations

import json

import numpy as np
import pytest

from compplan.harness import ExperimentConfig, run_all
from compplan.mdp import LabeledMDP, build_gridworld, bundled_grid_path, load_grid_spec


@pytest.fixture(scope="session")
def grid_spec():
    return load_grid_spec(bundled_grid_path())


@pytest.fixture(scope="session")
def grid(grid_spec) -> LabeledMDP:
    return build_gridworld(grid_spec)


@pytest.fixture(scope="session")
def reproduction(tmp_path_factory):
    """One full run of the default experiment, shared by the slower tests."""
    out = tmp_path_factory.mktemp("reproduce")
    report = run_all(ExperimentConfig(), out)
    timing = json.loads((out / "timing.json").read_text())
    # the planner study also builds the products and options it uses
    report["_elapsed"] = {k.split(" ", 1)[1]: v for k, v in timing.items() if k.startswith("study ")}
    return out, report


def chain_mdp(P, labels, ap=("g",), mu0=None) -> LabeledMDP:
    """Small labeled MDP from a dense (S, A, S) tensor."""
    P = np.asarray(P, dtype=float)
    S, A, _ = P.shape
    if mu0 is None:
        mu0 = np.eye(S)[0]
    return LabeledMDP(tuple(ap), tuple(f"a{k}" for k in range(A)), P, np.asarray(mu0, float), np.asarray(labels, np.int64))


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record (and print) the one-line verdict of an acceptance criterion."""

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {k:2d}: {detail}"
        _CRITERIA[k] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
