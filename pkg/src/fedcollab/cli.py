"""Command line entry point: ``fedcollab <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import benchmarks, governance, metrics
from .core_model import load_checkpoint
from .orchestrator import (
    RoundReport,
    compare_runs,
    load_config,
    prepare,
    run_experiment,
    write_run,
)
from .partition import (
    SYNTHETIC_DEFAULTS,
    load_dataset,
    make_partition,
    make_synthetic_corpus,
    save_dataset,
    save_plan,
)


def _dump(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_corpus(args: argparse.Namespace) -> int:
    params = {k: getattr(args, k) for k in SYNTHETIC_DEFAULTS if getattr(args, k) is not None}
    data = make_synthetic_corpus(seed=args.seed, **params)
    save_dataset(args.out, data)
    print(f"wrote {len(data)} examples to {args.out}")
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    data = load_dataset(args.data)
    params = {"n_clients": args.clients}
    if args.alpha is not None:
        params["alpha"] = args.alpha
    if args.ratio is not None:
        params["size_ratio"] = args.ratio
    if args.fraction is not None:
        params["fraction"] = args.fraction
    plan = make_partition(data, args.strategy, args.seed, **params)
    save_plan(args.out, plan)
    print(f"{plan.strategy}: {plan.n_clients} clients, sizes {plan.sizes()} -> {args.out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if overrides:
        cfg = replace(cfg, **overrides)
    prep = prepare(cfg)
    params, reports = run_experiment(cfg, prep)
    paths = write_run(args.out_dir, cfg, prep.spec, params, reports)
    last = reports[-1].global_metrics
    print(f"{cfg.mode}/{cfg.algorithm_name}: {len(reports)} rounds, final " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(last.items())))
    print(f"reports: {paths['jsonl']} {paths['csv']}")
    return 0


def _read_reports(path: Path) -> list[RoundReport]:
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        raw = json.loads(line)
        out.append(
            RoundReport(
                raw["round"],
                raw["global_metrics"],
                {int(k): v for k, v in raw["per_client_loss"].items()},
                tuple(raw["participating_clients"]),
            )
        )
    return out


def cmd_compare(args: argparse.Namespace) -> int:
    runs = []
    for item in args.runs:
        label, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"expected LABEL=REPORTS.jsonl, got {item!r}")
        runs.append((label, _read_reports(Path(path))))
    table = compare_runs(runs, baseline=args.baseline)
    print(table.to_csv() if args.csv else table.render())
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    batch = json.loads(Path(args.batch).read_text(encoding="utf-8"))
    _dump(metrics.evaluate_batch(batch))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    result, seconds = benchmarks.run_bench(args.name, args.seeds)
    if args.out:
        benchmarks.write_bench(args.out, args.name, result)
    summary = result.get("median", result)
    print(json.dumps(summary, sort_keys=True) if args.name != "governance" else f"{len(result['steps'])} steps")
    print(f"{args.name}: {seconds:.1f}s", file=sys.stderr)
    return 0


def cmd_registry(args: argparse.Namespace) -> int:
    if args.registry_cmd == "init":
        spec, params = load_checkpoint(args.genesis)
        gate = governance.GateConfig(
            benchmark_dataset_ref=args.benchmark,
            primary_metric=args.primary_metric,
            min_score=args.min_score,
            no_regression_metrics=tuple(args.no_regression or ()),
            regression_tolerance=args.tolerance,
        )
        reg = governance.registry_init(args.path, spec, params, gate, genesis_examples=args.genesis_examples,
                                       token_amount=args.tokens)
        print(f"initialised registry at {reg.root} (head v0)")
        return 0
    reg = governance.Registry(args.path)
    if args.registry_cmd == "submit":
        _, update = load_checkpoint(args.update)
        test_set = load_dataset(args.test_set) if args.test_set else None
        cid = reg.submit(args.contributor, args.base, update, args.examples, test_set, args.notes)
        print(f"contribution {cid} pending")
    elif args.registry_cmd == "gate":
        report = reg.evaluate_gate(args.contribution)
        _dump(report)
        return 0 if report["passed"] else 3
    elif args.registry_cmd == "decide":
        version = reg.decide(args.contribution, args.verdict, args.reviewer)
        print("rejected" if version is None else f"accepted -> head v{version.version_id}")
    elif args.registry_cmd == "log":
        for version, contribution in reg.history():
            line = f"v{version.version_id} parent={version.parent} by={version.contributor} {version.created_at}"
            if version.benchmark_scores:
                line += " " + " ".join(f"{k}={v:.4f}" for k, v in sorted(version.benchmark_scores.items()))
            if contribution is not None:
                line += f" (contribution {contribution.contribution_id})"
            if version.notes:
                line += f" - {version.notes}"
            print(line)
    elif args.registry_cmd == "balances":
        _dump(reg.balances())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcollab", description="Federated learning simulator and governed model registry")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="generate a synthetic labelled corpus")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    for k, v in SYNTHETIC_DEFAULTS.items():
        c.add_argument(f"--{k.replace('_', '-')}", dest=k, type=type(v), default=None)
    c.set_defaults(func=cmd_corpus)

    c = sub.add_parser("partition", help="write a client partition plan for a corpus")
    c.add_argument("--data", required=True)
    c.add_argument("--strategy", required=True,
                   choices=["uniform", "label_imbalanced", "quantity_imbalanced", "by_repository", "single_client"])
    c.add_argument("--clients", type=int, default=10)
    c.add_argument("--alpha", type=float)
    c.add_argument("--ratio", type=float)
    c.add_argument("--fraction", type=float)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_partition)

    c = sub.add_parser("simulate", help="run one experiment config")
    c.add_argument("config")
    c.add_argument("--seed", type=int)
    c.add_argument("--mode", choices=["federated", "centralized", "single_client"])
    c.add_argument("--rounds", type=int)
    c.add_argument("--out-dir", default="runs/latest")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="tabulate final-round metrics of several runs")
    c.add_argument("runs", nargs="+", metavar="LABEL=REPORTS.jsonl")
    c.add_argument("--baseline", default="centralized")
    c.add_argument("--csv", action="store_true")
    c.set_defaults(func=cmd_compare)

    c = sub.add_parser("evaluate", help="score an evaluation batch file")
    c.add_argument("batch")
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("bench", help="run a reproducible benchmark scenario")
    c.add_argument("name", choices=sorted(benchmarks.BENCHES))
    c.add_argument("--seeds", type=int, nargs="+", default=list(benchmarks.DEFAULT_SEEDS))
    c.add_argument("--out", help="write the full result as JSON")
    c.set_defaults(func=cmd_bench)

    r = sub.add_parser("registry", help="governed model registry")
    r.set_defaults(func=cmd_registry)
    rs = r.add_subparsers(dest="registry_cmd", required=True)
    c = rs.add_parser("init")
    c.add_argument("path")
    c.add_argument("--genesis", required=True, help="checkpoint of the initial model")
    c.add_argument("--benchmark", required=True, help="benchmark dataset file")
    c.add_argument("--primary-metric", default="accuracy")
    c.add_argument("--min-score", type=float, default=0.8)
    c.add_argument("--no-regression", nargs="*", default=["accuracy"])
    c.add_argument("--tolerance", type=float, default=0.0)
    c.add_argument("--genesis-examples", type=int, default=1)
    c.add_argument("--tokens", type=int, default=governance.DEFAULT_TOKEN_AMOUNT)
    c = rs.add_parser("submit")
    c.add_argument("path")
    c.add_argument("--contributor", required=True)
    c.add_argument("--base", type=int, required=True)
    c.add_argument("--update", required=True)
    c.add_argument("--examples", type=int, required=True)
    c.add_argument("--test-set")
    c.add_argument("--notes", default="")
    c = rs.add_parser("gate")
    c.add_argument("path")
    c.add_argument("contribution", type=int)
    c = rs.add_parser("decide")
    c.add_argument("path")
    c.add_argument("contribution", type=int)
    c.add_argument("verdict", choices=["accept", "reject"])
    c.add_argument("--reviewer", required=True)
    c = rs.add_parser("log")
    c.add_argument("path")
    c = rs.add_parser("balances")
    c.add_argument("path")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, governance.RegistryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
