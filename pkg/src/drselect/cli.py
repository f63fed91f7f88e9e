"""Command-line entry point: ``drselect <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from drselect.abstraction import abstract_policy_for, lift
from drselect.concepts import ConceptSubset, q_distance
from drselect.envs import build_loop4
from drselect.errors import InfeasibleError, OracleBudgetError, ValidationError
from drselect.experiments import (
    ALGORITHMS,
    SWEEP_AXES,
    ExperimentConfig,
    build_environment,
    load_config,
    records_to_csv,
    resolve_accuracies,
    resolve_k,
    run_pipeline,
    run_sweep,
    write_results,
    seed_context,
    select_subset,
)
from drselect.hardness import CoverageInstance, coverage_grid, reduction_equivalence
from drselect.mdp import greedy_policy, policy_value, value_iteration
from drselect.selection import build_instance, select_drs


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.algorithm:
        cfg = replace(cfg, algorithms=tuple(args.algorithm))
    return cfg


def _emit(records: list[dict[str, Any]], cfg: ExperimentConfig, out: str | None) -> None:
    if out:
        csv_path, json_path = write_results(records, out, cfg)
        print(f"wrote {csv_path} and {json_path}")
    else:
        sys.stdout.write(records_to_csv(records))


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _config(args)
    mdp, bank = build_environment(cfg)
    k = resolve_k(cfg.k, bank.n_concepts)
    acc = resolve_accuracies(cfg.accuracy, bank.n_concepts)
    rows = []
    for seed in cfg.seeds:
        ctx = seed_context(cfg, mdp, bank, k, acc, seed)
        for alg in cfg.algorithms:
            res = select_subset(alg, ctx, bank, k, seed)
            rec = res.to_record(bank.labels)
            rec["seed"] = seed
            rec["wall_time_ms"] = rec["wall_time_ms"] if cfg.record_timing else None
            rows.append(rec)
    text = json.dumps(rows, indent=2, sort_keys=True, default=lambda x: None) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selection.json").write_text(text)
        print(f"wrote {out / 'selection.json'}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _emit(run_pipeline(cfg), cfg, args.out or cfg.output)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _emit(run_sweep(cfg, args.axis), cfg, args.out or cfg.output)
    return 0


def cmd_intervene(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.alpha:
        cfg = replace(cfg, alphas=tuple(args.alpha))
    if cfg.accuracy is None:
        raise ValidationError("intervention needs noisy predictors: set 'accuracy' in the config")
    if not cfg.alphas:
        raise ValidationError("intervention needs at least one alpha")
    _emit(run_pipeline(cfg), cfg, args.out or cfg.output)
    return 0


def cmd_hardness(args: argparse.Namespace) -> int:
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text())
            instances = [CoverageInstance.from_dict(data)]
        except (yaml.YAMLError, KeyError, TypeError) as exc:
            raise ValidationError(f"bad coverage config: {exc}") from exc
    else:
        seed = 0 if args.seed is None else args.seed
        instances = coverage_grid(seed=seed)
    reports = [reduction_equivalence(inst) for inst in instances]
    failed = sum(not r.passed for r in reports)
    body = {
        "instances": len(reports),
        "failed": failed,
        "reports": [
            {
                "selected_sets": list(r.selected_sets),
                "drs_covered_weight": r.drs_covered_weight,
                "optimal_covered_weight": r.optimal_covered_weight,
                "closed_form_return": r.closed_form_return,
                "lifted_pair_return": r.lifted_pair_return,
                "passed": r.passed,
            }
            for r in reports
        ],
    }
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hardness.json").write_text(text)
    print(f"{len(reports)} instances, {failed} failed")
    return 1 if failed else 0


def cmd_example1(args: argparse.Namespace) -> int:
    mdp, bank = build_loop4()
    q = value_iteration(mdp)
    values = {}
    for j, name in enumerate(bank.labels):
        sub = ConceptSubset.of([j])
        ap, _ = abstract_policy_for(q, bank, sub)
        values[name] = policy_value(mdp, lift(ap, None, bank, sub))
    inst = build_instance(bank, q_distance(q), greedy_policy(q), range(mdp.n_states), 1, 0.0)
    chosen = select_drs(inst).subset.selected
    print(f"optimal value: {policy_value(mdp, greedy_policy(q)):.4f}")
    for name, v in values.items():
        print(f"{name}: policy value {v:.4f}")
    print(f"DRS (k=1) selects: {', '.join(bank.labels[j] for j in chosen)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drselect", description="Decision-relevant concept selection experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "select": (cmd_select, "run concept selection only"),
        "pipeline": (cmd_pipeline, "select, build the concept policy, evaluate"),
        "sweep": (cmd_sweep, "grid of pipeline runs over one axis"),
        "intervene": (cmd_intervene, "pipeline with noisy predictors and interventions"),
        "hardness": (cmd_hardness, "check the coverage reduction"),
        "example1": (cmd_example1, "the four-state loop example"),
    }
    for name, (fn, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--algorithm", action="append", choices=ALGORITHMS, help="restrict to this algorithm (repeatable)")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=SWEEP_AXES)
        if name == "intervene":
            p.add_argument("--alpha", type=float, action="append", help="intervention level (repeatable)")
        p.set_defaults(func=fn)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, InfeasibleError, OracleBudgetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
