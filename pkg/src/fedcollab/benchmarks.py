"""Reproducible benchmark scenarios on the default synthetic corpus.

Each ``bench_*`` function returns a JSON-serialisable dict of raw
per-seed numbers and their medians. Thresholds are applied by the test
suite, not here.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import tempfile
import time
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import governance
from .aggregation import AggregationConfig
from .core_model import (
    ModelSpec,
    TrainConfig,
    init_params,
    local_train,
    zeros_like_spec,
)
from .orchestrator import (
    ExperimentConfig,
    final_metric,
    prepare,
    run_centralized,
    run_experiment,
    run_federated,
)
from .partition import (
    make_synthetic_corpus,
    partition_uniform,
    save_dataset,
    train_eval_split,
)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def base_config(seed: int, **overrides) -> ExperimentConfig:
    """10k-example synthetic corpus, 10 uniform clients, 30 rounds, FedAvg."""
    cfg = ExperimentConfig(
        train=TrainConfig(),
        aggregation=AggregationConfig("fedavg"),
        data={"synthetic": {"n_examples": 10_000}},
        partition={"strategy": "uniform", "n_clients": 10},
        rounds=30,
        eval_split_fraction=0.2,
        seed=seed,
        mode="federated",
    )
    return replace(cfg, **overrides)


def final_accuracy(cfg: ExperimentConfig) -> float:
    return final_metric(run_experiment(cfg)[1], "accuracy")


def _median_table(runs: dict[str, Callable[[int], ExperimentConfig]], seeds: Sequence[int]) -> dict:
    out: dict = {"seeds": list(seeds), "per_seed": {}, "median": {}}
    for name, make in runs.items():
        vals = [final_accuracy(make(s)) for s in seeds]
        out["per_seed"][name] = vals
        out["median"][name] = float(np.median(vals))
    return out


def bench_one_step(seed: int = 0) -> dict:
    """One round of FedAvg over 10 equal clients vs one centralized full-batch step."""
    corpus = make_synthetic_corpus(n_examples=2000, seed=seed)
    train_cfg = TrainConfig(epochs=1, batch_size=10_000, learning_rate=0.5, prox_mu=0.0)
    fed = replace(base_config(seed), train=train_cfg, rounds=1, data={"synthetic": {"n_examples": 2000}})
    prep = prepare(fed, corpus)
    sizes = prep.plan.sizes()
    fed_params, _ = run_federated(fed, prep)
    cen = replace(fed, mode="centralized")
    cen_prep = prepare(cen, corpus)
    cen_params, _ = run_centralized(cen, cen_prep)
    diff = np.abs(fed_params.values - cen_params.values)
    rel = float(np.max(diff / np.maximum(np.abs(cen_params.values), 1e-300)))
    return {
        "client_sizes": sizes,
        "max_abs_diff": float(diff.max()),
        "max_rel_diff": rel,
        "rel_l2_diff": float(np.linalg.norm(diff) / np.linalg.norm(cen_params.values)),
    }


def bench_vs_single_client(seeds: Sequence[int] = DEFAULT_SEEDS) -> dict:
    return _median_table(
        {
            "fedavg": lambda s: base_config(s),
            "single_client": lambda s: base_config(s, mode="single_client", partition={"fraction": 0.1}),
        },
        seeds,
    )


def bench_vs_centralized(seeds: Sequence[int] = DEFAULT_SEEDS) -> dict:
    return _median_table(
        {
            "centralized": lambda s: base_config(s, mode="centralized"),
            "fedavg": lambda s: base_config(s),
        },
        seeds,
    )


def bench_heterogeneity(seeds: Sequence[int] = DEFAULT_SEEDS) -> dict:
    return _median_table(
        {
            "uniform": lambda s: base_config(s),
            "label_imbalanced": lambda s: base_config(
                s, partition={"strategy": "label_imbalanced", "n_clients": 10, "alpha": 0.1}
            ),
            "quantity_imbalanced": lambda s: base_config(
                s, partition={"strategy": "quantity_imbalanced", "n_clients": 10, "size_ratio": 4.0}
            ),
        },
        seeds,
    )


def bench_robust(seeds: Sequence[int] = DEFAULT_SEEDS) -> dict:
    """One of ten clients sends sign-flipped (x10) updates."""
    return _median_table(
        {
            "fedavg": lambda s: base_config(s, byzantine_clients=1),
            "fedtrimmedavg": lambda s: base_config(
                s, byzantine_clients=1, aggregation=AggregationConfig("fedtrimmedavg", 0.2)
            ),
            "fedmedian": lambda s: base_config(s, byzantine_clients=1, aggregation=AggregationConfig("fedmedian")),
        },
        seeds,
    )


def _fixed_clock() -> Callable[[], str]:
    counter = iter(range(10**6))
    return lambda: f"2024-01-01T00:00:{next(counter):02d}+00:00"


def _tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != ".lock"
    }


def bench_governance(workdir: str | Path | None = None, seed: int = 0) -> dict:
    """Scripted registry scenario: reject a bad PR, merge a good one, refuse stale bases."""
    own_tmp = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="fedcollab-gov-")) if own_tmp else Path(workdir)
    try:
        return _governance_scenario(workdir, seed)
    finally:
        if own_tmp:
            shutil.rmtree(workdir, ignore_errors=True)


def _governance_scenario(workdir: Path, seed: int) -> dict:
    corpus = make_synthetic_corpus(n_examples=4000, seed=seed)
    # MLP: a zero update merged with huge weight must hurt accuracy, which a
    # linear model's scale-invariant argmax would hide
    spec = ModelSpec("mlp", corpus.feature_dim, corpus.num_classes, hidden_dim=16)
    rest, bench_idx = train_eval_split(len(corpus), 0.25, seed)
    bench_path = workdir / "benchmark.json"
    save_dataset(bench_path, corpus.subset(bench_idx))
    parts = partition_uniform(corpus.subset(rest), 3, seed)
    founders, alice, bob = (corpus.subset(rest[list(parts.assignments[k])]) for k in range(3))
    train = TrainConfig(epochs=5, seed=seed)
    genesis, _ = local_train(spec, init_params(spec, seed), founders, train)
    gate = governance.GateConfig(str(bench_path), "accuracy", min_score=0.8,
                                 no_regression_metrics=("accuracy",), regression_tolerance=0.01)
    reg = governance.registry_init(workdir / "registry", spec, genesis, gate,
                                   genesis_examples=len(founders), clock=_fixed_clock())
    log: dict = {"steps": []}

    def step(name: str, **info) -> None:
        log["steps"].append({"step": name, **info})

    head0_bytes = (reg.root / reg.head().checkpoint_ref).read_bytes()
    step("init", head=reg.head().version_id, versions=len(reg.versions()))

    bad = reg.submit("mallory", 0, zeros_like_spec(spec), 10**6, notes="zeroed weights")
    bad_report = reg.evaluate_gate(bad)
    try:
        reg.decide(bad, "accept", "committee")
        accept_bad = "accepted"
    except governance.GateError:
        accept_bad = "refused"
    reg.decide(bad, "reject", "committee")
    step(
        "below_gate",
        passed=bad_report["passed"],
        accept_attempt=accept_bad,
        head=reg.head().version_id,
        head_unchanged=(reg.root / reg.head().checkpoint_ref).read_bytes() == head0_bytes,
        balances=reg.balances(),
    )

    alice_params, _ = local_train(spec, reg.params(), alice, replace(train, seed=seed + 1))
    good = reg.submit("alice", 0, alice_params, len(alice), new_test_set=bob.subset(range(200)),
                      notes="retrained on alice's repositories")
    good_report = reg.evaluate_gate(good)
    version = reg.decide(good, "accept", "committee")
    events = reg.ledger.events()
    step(
        "merge",
        passed=good_report["passed"],
        report=good_report["metrics"],
        head=version.version_id,
        parent=version.parent,
        balances=reg.balances(),
        replayed_balances=governance.fold_balances(events),
        ledger_total=sum(e.tokens for e in events),
    )

    bob_params, _ = local_train(spec, reg.params(), bob, replace(train, seed=seed + 2))
    first = reg.submit("bob", 1, bob_params, len(bob))
    second = reg.submit("carol", 1, alice_params, len(alice))
    reg.evaluate_gate(first)
    merged = reg.decide(first, "accept", "committee")
    try:
        reg.evaluate_gate(second)
        second_outcome = "gated"
    except governance.StaleBaseError:
        second_outcome = "stale"
    try:
        reg.submit("dave", 1, bob_params, 10)
        stale_submit = "accepted"
    except governance.StaleBaseError:
        stale_submit = "stale"
    step("stale", merged_head=merged.version_id, second=second_outcome, stale_submit=stale_submit,
         pending=[c.contribution_id for c in reg.contributions().values() if c.status == "pending"])

    reopened = governance.Registry(reg.root)
    history = reopened.history()
    step(
        "history",
        version_ids=[v.version_id for v, _ in history],
        contributors=[v.contributor for v, _ in history],
        gate_sound=all(reopened.reevaluate(v.version_id)["accuracy"] >= gate.min_score for v, _ in history[1:]),
        balances=reopened.balances(),
    )
    log["files"] = _tree_digest(reg.root)
    return log


BENCHES: dict[str, Callable[..., dict]] = {
    "one_step": lambda seeds: bench_one_step(seeds[0]),
    "vs_single_client": bench_vs_single_client,
    "vs_centralized": bench_vs_centralized,
    "heterogeneity": bench_heterogeneity,
    "robust": bench_robust,
    "governance": lambda seeds: bench_governance(seed=seeds[0]),
}


def run_bench(name: str, seeds: Sequence[int] = DEFAULT_SEEDS) -> tuple[dict, float]:
    """Run one scenario; returns (result, wall seconds)."""
    start = time.perf_counter()
    result = BENCHES[name](list(seeds))
    return result, time.perf_counter() - start


def write_bench(path: str | Path, name: str, result: dict) -> None:
    Path(path).write_text(json.dumps({"bench": name, "result": result}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
