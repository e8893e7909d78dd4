"""Command line entry point: ``compplan <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .mdp import ModelError, bind_task, build_gridworld, bundled_grid_path, load_grid_spec, load_mdp, save_mdp, ssp_from_sets
from .options import CompositionSpec, compose, composite_option, load_options, make_primitive_option, save_options
from .product import PLANNERS, build_macro_model, build_product, max_satisfaction, plan, satisfaction_probability
from .scltl import DFA, FormulaError, guard_eventualities, parse, to_dfa
from .solver import hardmax_vi, softmax_vi
from .taskdecomp import decompose_dfa, tasks_from_json, tasks_to_json

log = logging.getLogger("compplan")


def _formula(text: str, ap, guard: str | None):
    f = parse(text, ap)
    return guard_eventualities(f, guard) if guard else f


def cmd_translate(args) -> int:
    ap = args.ap.split(",")
    dfa = to_dfa(_formula(args.formula, ap, args.guard), ap)
    text = json.dumps(dfa.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_decompose(args) -> int:
    dfa = DFA.load(args.dfa)
    symbols = load_mdp(args.mdp).label_symbols() if args.mdp else None
    ranked, _, tasks, prims, comps = decompose_dfa(dfa, symbols)
    doc = json.loads(tasks_to_json(prims + comps))
    doc["ranks"] = [None if r == float("inf") else int(r) for r in ranked.rank]
    doc["decomposition"] = [str(t) for t in tasks]
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_build_grid(args) -> int:
    spec = load_grid_spec(args.grid or bundled_grid_path())
    save_mdp(build_gridworld(spec), args.out)
    return 0


def _atom_states(mdp, atoms: str | None) -> np.ndarray:
    mask = np.zeros(mdp.n_states, dtype=bool)
    for a in filter(None, (atoms or "").split(",")):
        mask |= (mdp.labels & (1 << mdp.alphabet.index(a))) > 0
    return mask


def cmd_solve(args) -> int:
    mdp = load_mdp(args.mdp)
    if args.task:
        path, _, k = args.task.partition("#")
        ct = tasks_from_json(Path(path).read_text())[int(k or 0)]
        task = bind_task(mdp, ct, args.gamma, args.alpha, args.tau)
    elif args.goal:
        unsafe = _atom_states(mdp, args.unsafe)
        goal = _atom_states(mdp, args.goal) & ~unsafe
        task = ssp_from_sets(mdp, goal, unsafe, args.gamma, args.alpha, args.tau, args.goal)
    else:
        raise ValueError("solve needs --task or --goal")
    solve = softmax_vi if args.operator == "softmax" else hardmax_vi
    vf, pi = solve(task, tol=args.tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "values.csv", "w") as fh:
        fh.write("state,value\n")
        for s, v in enumerate(vf.values):
            fh.write(f"{s},{v:.12g}\n")
    with open(out / "policy.csv", "w") as fh:
        fh.write("state,action,prob\n")
        for s, a in zip(*np.nonzero(pi)):
            fh.write(f"{s},{a},{pi[s, a]:.12g}\n")
    (out / "summary.json").write_text(json.dumps({"iterations": vf.iterations, "residual": vf.residual}, indent=1))
    return 0


def cmd_synth_options(args) -> int:
    mdp = load_mdp(args.mdp)
    tasks = [t for t in tasks_from_json(Path(args.tasks).read_text()) if t.primitive]
    opts = [make_primitive_option(t, mdp, args.gamma, args.alpha, args.tau, args.tol) for t in tasks]
    save_options(opts, args.out)
    for o in opts:
        print(f"{o.name}: {o.solve_info.iterations} iterations")
    return 0


def _resolve(options, ref: str, prefix: str = "s"):
    by_name = {o.name: o for o in options}
    for key in (ref, prefix + ref):
        if key in by_name:
            return by_name[key]
    raise SystemExit(f"no option named {ref!r}; have {sorted(by_name)}")


def cmd_compose(args) -> int:
    mdp = load_mdp(args.mdp)
    opts = load_options(args.options, mdp.n_states, mdp.n_actions)
    operands = [_resolve(opts, r) for r in args.operands.split(",")]
    spec = CompositionSpec(args.op, tuple(o.name for o in operands), args.eta)
    comp = compose(spec, operands, mdp, args.gamma, args.alpha, args.tau)
    save_options([comp], args.out)
    print(f"composed {comp.name}")
    return 0


def cmd_plan(args) -> int:
    mdp = load_mdp(args.mdp)
    f = _formula(args.formula, mdp.ap, args.guard)
    dfa = to_dfa(f, mdp.ap)
    product = build_product(mdp, dfa, args.alpha)
    macro = macro1 = None
    if args.planner in ("option", "mixed"):
        if args.options:
            opts = load_options(args.options, mdp.n_states, mdp.n_actions)
        else:
            _, _, _, prims, comps = decompose_dfa(dfa, mdp.label_symbols())
            lib = {(t.atom, t.unsafe): make_primitive_option(t, mdp, args.gamma, args.alpha, args.tau, args.tol) for t in prims}
            opts = list(lib.values()) + [composite_option(t, lib, mdp, args.gamma, args.alpha, args.tau) for t in comps]
        macro = build_macro_model(product, opts, args.gamma)
        macro1 = build_macro_model(product, opts, 1.0)
    r = plan(product, args.planner, macro, args.gamma, args.tau, args.tol)
    if args.planner == "optimal":
        p, _ = max_satisfaction(product)
    else:
        p = satisfaction_probability(product, r.policy, macro1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "values.csv", "w") as fh:
        fh.write("s,q,V\n")
        for (s, q), v in zip(product.pairs, r.values):
            fh.write(f"{s},{q},{v:.12g}\n")
    names = list(mdp.actions) + (list(macro.names) if macro else [])
    pol = {f"{s},{q}": {names[k]: float(w) for k, w in enumerate(row) if w > 0} for (s, q), row in zip(product.pairs.tolist(), r.policy)}
    (out / "policy.json").write_text(json.dumps(pol, indent=1))
    with open(out / "trace.csv", "w") as fh:
        fh.write("iteration,V_init,residual\n")
        for it, v, res in r.trace:
            fh.write(f"{it},{v:.12g},{res:.6g}\n")
    (out / "summary.json").write_text(json.dumps({"p": float(p[product.init]), "n": r.iterations}, indent=1))
    print(f"{args.planner}: p={p[product.init]:.4f} n={r.iterations}")
    return 0


def cmd_reproduce(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    report = harness.run_all(cfg, args.out)
    for name, g in report["gates"].items():
        print(f"{'PASS' if g['pass'] else 'FAIL'} {name}: {g['detail']}")
    failed = [k for k, g in report["gates"].items() if not g["pass"]]
    if failed:
        print(f"failing gates: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _solver_args(p, tol=1e-3):
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=100.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=tol)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="compplan", description="Compositional planning with options for sc-LTL tasks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("translate", help="sc-LTL formula to DFA JSON")
    p.add_argument("--formula", required=True)
    p.add_argument("--ap", required=True, help="comma-separated atomic propositions")
    p.add_argument("--guard", help="unsafe atom used to guard eventualities, e.g. C")
    p.add_argument("--out")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("decompose", help="rank a DFA and list its reachability subtasks")
    p.add_argument("--dfa", required=True)
    p.add_argument("--mdp", help="restrict ranking to the labels of this MDP")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("build-grid", help="grid spec JSON to MDP JSON")
    p.add_argument("--grid", "--spec", dest="grid", help="grid spec (default: bundled 6x8 layout)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_grid)

    p = sub.add_parser("solve", help="value iteration for one reachability task")
    p.add_argument("--mdp", required=True)
    p.add_argument("--task", help="tasks file and index, e.g. tasks.json#0")
    p.add_argument("--goal", help="comma-separated goal atoms (union)")
    p.add_argument("--unsafe", default="")
    p.add_argument("--operator", choices=("softmax", "hardmax"), default="softmax")
    p.add_argument("--out", required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth-options", help="primitive options for the primitive tasks of a tasks file")
    p.add_argument("--mdp", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_synth_options)

    p = sub.add_parser("compose", help="GCD composition of stored options")
    p.add_argument("--mdp", required=True)
    p.add_argument("--options", required=True)
    p.add_argument("--op", choices=("or", "and", "minus"), required=True)
    p.add_argument("--operands", required=True, help="option names or region numbers, e.g. 2,3")
    p.add_argument("--eta", type=float)
    p.add_argument("--out", required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("plan", help="plan on the product MDP")
    p.add_argument("--mdp", required=True)
    p.add_argument("--formula", required=True)
    p.add_argument("--guard", default="C")
    p.add_argument("--planner", choices=PLANNERS, default="mixed")
    p.add_argument("--options")
    p.add_argument("--out", required=True)
    _solver_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("reproduce", help="run every experiment and write the report")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormulaError, ModelError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
