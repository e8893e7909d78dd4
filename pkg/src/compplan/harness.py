"""End-to-end experiments: composition quality, planner comparison and policy deviation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mdp import (
    GridWorldSpec,
    LabeledMDP,
    build_gridworld,
    bundled_grid_path,
    grid_matrix,
    load_grid_spec,
    ssp_from_sets,
)
from .options import (
    CompositionSpec,
    OptionPolicy,
    compose,
    composite_option,
    direct_option,
    make_primitive_option,
)
from .product import (
    PLANNERS,
    MacroModel,
    PlanResult,
    ProductModel,
    build_macro_model,
    build_product,
    evaluate_policy,
    max_satisfaction,
    plan,
    satisfaction_probability,
    simulate_option,
)
from .scltl import DFA, guard_eventualities, parse, to_dfa
from .solver import evaluate_on_task, hardmax_vi, soft_policy_value
from .taskdecomp import CondReachTask, RankedDFA, decompose_dfa

log = logging.getLogger(__name__)

DEFAULT_FORMULAS = {
    "phi1": "!C U F (s1 & (F s2 & F s3))",
    "phi2": "!C U F ((s1 | s3) & F s2)",
    "phi3": "!C U F ((s1 | s2) & F (s2 & s3))",
}


@dataclass
class ExperimentConfig:
    grid: str | None = None  # None selects the bundled layout
    formulas: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FORMULAS))
    guard_unsafe: bool = True  # unfold "F g" under "!C U ..." into "!C U g"
    gamma: float = 0.9
    tau: float = 1.0
    alpha: float = 100.0
    tol: float = 1e-3
    eta_or: float = 10.0
    eta_and: float = -10.0
    seed: int = 0
    composition_operands: tuple[str, str] = ("s2", "s3")
    mc_rollouts: int = 100_000
    mc_triples: int = 10
    mc_task: str = "phi1"
    recovery_tol: float = 1e-12
    # acceptance thresholds
    or_error_max: float = 1e-2
    and_error_max: float = 5e-2
    option_loss_max: float = 0.15
    option_loss_task: str = "phi1"
    deviation_max: float = 0.2

    def __post_init__(self):
        self.composition_operands = tuple(self.composition_operands)
        if self.eta_or <= 0 or self.eta_and >= 0:
            raise ValueError("need eta_or > 0 and eta_and < 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["composition_operands"] = list(self.composition_operands)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_json(json.loads(Path(path).read_text()))

    def grid_spec(self) -> GridWorldSpec:
        return load_grid_spec(self.grid or bundled_grid_path())


@dataclass
class TaskSetup:
    name: str
    text: str
    formula: object
    dfa: DFA
    ranked: RankedDFA
    primitives: list[CondReachTask]
    composites: list[CondReachTask]
    options: list[OptionPolicy]
    product: ProductModel
    macro: MacroModel
    macro1: MacroModel
    plans: dict | None = None


class Experiment:
    """Shared state of one configuration: the MDP, primitive options and per-task products."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.spec = config.grid_spec()
        self.mdp: LabeledMDP = build_gridworld(self.spec)
        self.library: dict[tuple, OptionPolicy] = {}
        self.timing: dict[str, float] = {}
        self._tasks: dict[str, TaskSetup] = {}

    def unsafe_mask(self) -> np.ndarray:
        return self.atom_mask(self.spec.obstacle_label)

    def atom_mask(self, atom: str) -> np.ndarray:
        bit = 1 << self.mdp.alphabet.index(atom)
        return (self.mdp.labels & bit) > 0

    def primitive(self, task: CondReachTask) -> OptionPolicy:
        key = (task.atom, task.unsafe)
        if key not in self.library:
            c = self.config
            t0 = time.perf_counter()
            self.library[key] = make_primitive_option(task, self.mdp, c.gamma, c.alpha, c.tau, c.tol)
            self.timing[f"option {task}"] = time.perf_counter() - t0
        return self.library[key]

    def task(self, name: str) -> TaskSetup:
        if name in self._tasks:
            return self._tasks[name]
        c = self.config
        text = c.formulas[name]
        f = parse(text, self.mdp.ap)
        if c.guard_unsafe:
            f = guard_eventualities(f, self.spec.obstacle_label)
        dfa = to_dfa(f, self.mdp.ap)
        ranked, _, _, prims, comps = decompose_dfa(dfa, self.mdp.label_symbols())
        options = [self.primitive(t) for t in prims]
        t0 = time.perf_counter()
        options += [composite_option(t, self.library, self.mdp, c.gamma, c.alpha, c.tau, c.eta_or, c.eta_and) for t in comps]
        self.timing[f"compose {name}"] = time.perf_counter() - t0
        product = build_product(self.mdp, dfa, c.alpha)
        macro = build_macro_model(product, options, c.gamma)
        macro1 = build_macro_model(product, options, 1.0)
        setup = TaskSetup(name, text, f, dfa, ranked, prims, comps, options, product, macro, macro1)
        self._tasks[name] = setup
        return setup


# ---------------------------------------------------------------- composition study


def _errors(a: np.ndarray, b: np.ndarray) -> dict:
    """Relative deviation of ``a`` from the reference ``b``."""
    return {
        "e2": float(np.linalg.norm(a - b) / np.linalg.norm(b)),
        "einf": float(np.max(np.abs(a - b)) / np.max(np.abs(b))),
    }


def run_composition_study(config: ExperimentConfig, outdir: str | Path | None = None, exp: Experiment | None = None) -> dict:
    """Compose the two operand options by OR and AND and compare with direct synthesis.

    Gated errors use entropy-free values; entropy-regularized values and a
    hardmax baseline are reported alongside.
    """
    exp = exp or Experiment(config)
    mdp, c = exp.mdp, config
    unsafe = exp.unsafe_mask()
    operands = [
        direct_option(mdp, exp.atom_mask(a) & ~unsafe, unsafe, c.gamma, c.alpha, c.tau, c.tol, name=a)
        for a in c.composition_operands
    ]
    out = {}
    for op, eta in (("or", c.eta_or), ("and", c.eta_and)):
        t0 = time.perf_counter()
        comp = compose(CompositionSpec(op, tuple(c.composition_operands), eta), operands, mdp, c.gamma, c.alpha, c.tau)
        exp.timing[f"composition {op}"] = time.perf_counter() - t0
        task = ssp_from_sets(mdp, comp.goal, unsafe, c.gamma, c.alpha, c.tau, op)
        direct = direct_option(mdp, comp.goal, unsafe, c.gamma, c.alpha, c.tau, c.tol)
        _, hard = hardmax_vi(task, tol=c.tol)
        V_comp = evaluate_on_task(task, comp.policy, comp.termination)
        V_direct = evaluate_on_task(task, direct.policy)
        V_hard = evaluate_on_task(task, hard)
        S_comp = soft_policy_value(task, comp.policy)
        S_direct = soft_policy_value(task, direct.policy)
        literal = compose(CompositionSpec(op, tuple(c.composition_operands), eta), operands, mdp, c.gamma, c.alpha, c.tau, literal=True)
        V_lit = evaluate_on_task(task, literal.policy, literal.termination)
        errs = _errors(V_comp, V_direct)
        out[op] = {
            "eta": eta,
            **errs,
            "soft": _errors(S_comp, S_direct),
            "vs_hardmax": _errors(V_comp, V_hard),
            "literal_selection": _errors(V_lit, V_direct),
            "goal_cells": int(comp.goal.sum()),
            "argmax_in_goal": bool(comp.goal[np.argmax(np.where(comp.goal, c.alpha, V_comp))]),
            "best_nongoal_value": float(np.max(np.where(comp.goal | unsafe, -np.inf, V_comp))),
        }
        if outdir is not None:
            d = Path(outdir)
            d.mkdir(parents=True, exist_ok=True)
            for tag, V in (("composed", V_comp), ("direct", V_direct)):
                shown = np.where(comp.goal, c.alpha, V)
                write_matrix(d / f"fig3_{op}_{tag}.csv", grid_matrix(mdp, shown))
    if outdir is not None:
        Path(outdir, "errors.json").write_text(json.dumps(out, indent=1, sort_keys=True))
    return out


def write_matrix(path: Path, M: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in M:
            w.writerow([f"{v:.6f}" for v in row])


def ascii_heatmap(M: np.ndarray, vmax: float) -> str:
    shades = " .:-=+*#%@"
    lines = []
    for row in M:
        lines.append("".join(shades[min(len(shades) - 1, int(v / vmax * (len(shades) - 1) + 0.5))] * 2 for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------- planners


def _macro_for(kind: str, setup: TaskSetup, undiscounted: bool = False) -> MacroModel | None:
    if kind in ("option", "mixed"):
        return setup.macro1 if undiscounted else setup.macro
    return None


def run_planners(exp: Experiment, name: str) -> dict:
    c = exp.config
    setup = exp.task(name)
    prod = setup.product
    results: dict[str, PlanResult] = {}
    rows = {}
    for kind in PLANNERS:
        t0 = time.perf_counter()
        r = plan(prod, kind, _macro_for(kind, setup), c.gamma, c.tau, c.tol)
        exp.timing[f"plan {name} {kind}"] = time.perf_counter() - t0
        results[kind] = r
        p = satisfaction_probability(prod, r.policy, _macro_for(kind, setup, True))
        rows[kind] = {"p": float(p[prod.init]), "n": r.iterations, "V_init": float(r.values[prod.init])}
    p_max, _ = max_satisfaction(prod)
    rows["optimal"]["p_greedy"] = rows["optimal"]["p"]
    rows["optimal"]["p"] = float(p_max[prod.init])
    return {"rows": rows, "results": results, "p_max": p_max}


def mixed_recovery(exp: Experiment, name: str) -> float:
    """Largest amount by which hardmax action values exceed hardmax mixed values."""
    c = exp.config
    setup = exp.task(name)
    a = plan(setup.product, "action", None, c.gamma, c.tau, c.recovery_tol, operator="hardmax")
    m = plan(setup.product, "mixed", setup.macro, c.gamma, c.tau, c.recovery_tol, operator="hardmax")
    return float(np.max(a.values - m.values))


def macro_check(exp: Experiment, name: str, rng: np.random.Generator) -> dict:
    """Undiscounted mass conservation plus a Monte-Carlo check of discounted outcome masses."""
    c = exp.config
    setup = exp.task(name)
    prod, m1, m = setup.product, setup.macro1, setup.macro
    sums = m1.D.sum(axis=2)[m1.admissible]
    mass_err = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    cand = np.argwhere(m.admissible)
    picks = cand[rng.choice(len(cand), size=min(c.mc_triples, len(cand)), replace=False)]
    picks = picks[np.lexsort((picks[:, 1], picks[:, 0]))]
    triples = []
    worst = 0.0
    for o, x in picks:
        ends, steps = simulate_option(prod, setup.options[o], int(x), c.mc_rollouts, c.gamma, rng)
        disc = c.gamma ** steps.astype(float)
        q_end = prod.pairs[ends, 1]
        q_model = prod.pairs[:, 1]
        groups = []
        for q in np.unique(np.r_[q_end, q_model[m.D[o, x] > 0]]):
            sample = np.where(q_end == q, disc, 0.0)
            est = float(sample.mean())
            se = max(float(sample.std(ddof=1) / np.sqrt(len(sample))), 1.0 / len(sample))
            model = float(m.D[o, x][q_model == q].sum())
            z = abs(est - model) / se
            worst = max(worst, z)
            groups.append({"q": int(q), "model": model, "mc": est, "se": se, "z": z})
        triples.append({"option": setup.options[o].name, "state": [int(v) for v in prod.pairs[x]], "groups": groups})
    return {"mass_error": mass_err, "max_z": worst, "triples": triples}


def run_planner_comparison(config: ExperimentConfig, outdir: str | Path | None = None, exp: Experiment | None = None) -> dict:
    exp = exp or Experiment(config)
    report = {}
    for name in config.formulas:
        res = run_planners(exp, name)
        setup = exp.task(name)
        report[name] = {
            "formula": setup.text,
            "guarded": str(setup.formula),
            "dfa_states": setup.dfa.n_states,
            "ranks": [None if r == float("inf") else int(r) for r in setup.ranked.rank],
            "primitives": [str(t) for t in setup.primitives],
            "composites": [str(t) for t in setup.composites],
            "product_states": setup.product.n_states,
            "planners": res["rows"],
            "macro_mass_error": float(np.max(np.abs(setup.macro1.D.sum(axis=2)[setup.macro1.admissible] - 1.0))),
        }
        setup.plans = res["results"]  # reused by the deviation study
        if outdir is not None:
            d = Path(outdir)
            d.mkdir(parents=True, exist_ok=True)
            with open(d / f"fig4_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["planner", "iteration", "V_init", "residual"])
                for kind, r in res["results"].items():
                    for it, v, resid in r.trace:
                        w.writerow([kind, it, f"{v:.10g}", f"{resid:.6g}"])
    if outdir is not None:
        write_table1(Path(outdir) / "table1.csv", report)
    return report


def write_table1(path: Path, report: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "planner", "p", "n"])
        for name, rep in report.items():
            for kind in PLANNERS:
                row = rep["planners"][kind]
                w.writerow([name, kind, f"{row['p']:.6f}", row["n"]])


# ---------------------------------------------------------------- policy deviation


def run_policy_deviation(config: ExperimentConfig, outdir: str | Path | None = None, exp: Experiment | None = None) -> list[dict]:
    """Entropy-free values of the option and mixed policies relative to the action policy."""
    exp = exp or Experiment(config)
    c = config
    rows = []
    for name in config.formulas:
        setup = exp.task(name)
        plans = setup.plans or run_planners(exp, name)["results"]
        prod = setup.product
        V = {k: evaluate_policy(prod, plans[k].policy, _macro_for(k, setup), c.gamma, c.alpha) for k in ("action", "option", "mixed")}
        for k in ("option", "mixed"):
            rows.append({"task": name, "pair": f"{k}-action", **_errors(V[k], V["action"])})
    if outdir is not None:
        d = Path(outdir)
        d.mkdir(parents=True, exist_ok=True)
        write_table2(d / "table2.csv", rows)
    return rows


def write_table2(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "pair", "e2", "einf"])
        for r in rows:
            w.writerow([r["task"], r["pair"], f"{r['e2']:.6f}", f"{r['einf']:.6f}"])


# ---------------------------------------------------------------- gates and report


def evaluate_gates(config: ExperimentConfig, comp: dict, planners: dict, deviation: list[dict], recovery: dict, macro: dict) -> dict:
    c = config
    g = {}

    def gate(name, ok, detail):
        g[name] = {"pass": bool(ok), "detail": detail}

    o, a = comp["or"], comp["and"]
    gate("composition_or", max(o["e2"], o["einf"]) <= c.or_error_max, f"e2={o['e2']:.3g} einf={o['einf']:.3g} <= {c.or_error_max}")
    gate("composition_and", max(a["e2"], a["einf"]) <= c.and_error_max, f"e2={a['e2']:.3g} einf={a['einf']:.3g} <= {c.and_error_max}")
    for name, rep in planners.items():
        n = {k: rep["planners"][k]["n"] for k in PLANNERS}
        gate(f"iterations_{name}", n["option"] < n["mixed"] < n["action"], f"option {n['option']} < mixed {n['mixed']} < action {n['action']}")
        p = {k: rep["planners"][k]["p"] for k in PLANNERS}
        ok = all(p["optimal"] >= p[k] - 1e-9 for k in ("action", "option", "mixed"))
        gate(f"optimality_{name}", ok, " ".join(f"{k}={v:.4f}" for k, v in p.items()))
        gate(f"recovery_{name}", recovery[name] <= 1e-9, f"max(V_action - V_mixed) = {recovery[name]:.3g}")
    if c.option_loss_task in planners:
        p = planners[c.option_loss_task]["planners"]
        loss = (p["optimal"]["p"] - p["option"]["p"]) / p["optimal"]["p"]
        gate("option_loss", loss <= c.option_loss_max, f"{loss:.3f} <= {c.option_loss_max}")
    by_task = {}
    for r in deviation:
        by_task.setdefault(r["task"], {})[r["pair"]] = r
    for name, d in by_task.items():
        mix, opt = d["mixed-action"], d["option-action"]
        ok = mix["einf"] < opt["einf"] and max(mix["e2"], mix["einf"], opt["e2"], opt["einf"]) < c.deviation_max
        gate(f"deviation_{name}", ok, f"mixed einf={mix['einf']:.4f} < option einf={opt['einf']:.4f}; all < {c.deviation_max}")
    if macro:
        gate("macro_mass", max(m["mass_error"] for m in macro.values()) <= 1e-9, "undiscounted outcome masses sum to 1")
        gate("macro_monte_carlo", all(m["max_z"] <= 3.0 for m in macro.values() if "max_z" in m), "discounted masses within 3 standard errors")
    return g


def run_all(config: ExperimentConfig, outdir: str | Path) -> dict:
    """Run the three studies and write every artifact under ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    exp = Experiment(config)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True))
    clock = time.perf_counter()

    def lap(study):
        nonlocal clock
        now = time.perf_counter()
        exp.timing[f"study {study}"] = now - clock
        clock = now

    comp = run_composition_study(config, out / "composition", exp)
    lap("composition")
    planners = run_planner_comparison(config, out / "planners", exp)
    lap("planners")
    deviation = run_policy_deviation(config, out / "deviation", exp)
    lap("deviation")
    recovery = {name: mixed_recovery(exp, name) for name in config.formulas}
    lap("recovery")
    rng = np.random.default_rng(config.seed)
    macro = {}
    for name in config.formulas:
        if name == config.mc_task:
            macro[name] = macro_check(exp, name, rng)
        else:
            setup = exp.task(name)
            sums = setup.macro1.D.sum(axis=2)[setup.macro1.admissible]
            macro[name] = {"mass_error": float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0}
    lap("macro")
    gates = evaluate_gates(config, comp, planners, deviation, recovery, macro)
    prims = {}
    for (atom, _), o in sorted(exp.library.items(), key=lambda kv: kv[1].name):
        prims[o.name] = {"iterations": o.solve_info.iterations, "residual": o.solve_info.residual}
    report = {
        "config": config.to_json(),
        "layout": exp.spec.to_json(),
        "primitive_options": prims,
        "composition": comp,
        "tasks": planners,
        "policy_deviation": deviation,
        "mixed_recovery": recovery,
        "macro_model": macro,
        "gates": gates,
        "passed": all(v["pass"] for v in gates.values()),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    write_table1(out / "table1.csv", planners)
    write_table2(out / "table2.csv", deviation)
    exp.timing["total"] = time.perf_counter() - t_start
    (out / "timing.json").write_text(json.dumps(exp.timing, indent=1, sort_keys=True))
    (out / "summary.md").write_text(markdown_summary(report, exp))
    return report


def markdown_summary(report: dict, exp: Experiment) -> str:
    lines = ["# Reproduction summary", ""]
    lines.append("## Composition errors (entropy-free values vs direct softmax synthesis)")
    lines.append("")
    lines.append("| op | e2 | einf | e2 (soft) | einf (soft) |")
    lines.append("|---|---|---|---|---|")
    for op in ("or", "and"):
        e = report["composition"][op]
        lines.append(f"| {op} | {e['e2']:.2e} | {e['einf']:.2e} | {e['soft']['e2']:.2e} | {e['soft']['einf']:.2e} |")
    lines += ["", "## Planners", "", "| task | planner | p | n | t (s) |", "|---|---|---|---|---|"]
    for name, rep in report["tasks"].items():
        for kind in PLANNERS:
            row = rep["planners"][kind]
            t = exp.timing.get(f"plan {name} {kind}", float("nan"))
            lines.append(f"| {name} | {kind} | {row['p']:.4f} | {row['n']} | {t:.3f} |")
    lines += ["", "## Policy deviation", "", "| task | pair | e2 | einf |", "|---|---|---|---|"]
    for r in report["policy_deviation"]:
        lines.append(f"| {r['task']} | {r['pair']} | {r['e2']:.4f} | {r['einf']:.4f} |")
    lines += ["", "## Gates", ""]
    for k, v in report["gates"].items():
        lines.append(f"- {'PASS' if v['pass'] else 'FAIL'} {k}: {v['detail']}")
    return "\n".join(lines) + "\n"
