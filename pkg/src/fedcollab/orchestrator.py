"""Federated simulation rounds and the centralized / single-client baselines."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .aggregation import AggregationConfig, ClientUpdate, aggregate
from .core_model import (
    DEFAULT_PROX_MU,
    ModelSpec,
    ParameterVector,
    TrainConfig,
    check_layout,
    cross_entropy,
    init_params,
    local_train,
    predict,
    save_checkpoint,
)
from .partition import (
    SYNTHETIC_DEFAULTS,
    Dataset,
    PartitionPlan,
    load_dataset,
    load_plan,
    make_partition,
    make_synthetic_corpus,
    select_single_client,
    train_eval_split,
)

log = logging.getLogger(__name__)

MODES = ("federated", "centralized", "single_client")


class ConfigError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts (independent streams per role)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# stream tags for derive_seed
_DATA, _SPLIT, _PART, _INIT, _TRAIN, _BYZ, _SAMPLE = range(7)


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation run.

    ``data`` is ``{"synthetic": {...generator kwargs...}}`` or
    ``{"path": "corpus.json"}``. ``partition`` is an inline strategy
    (``{"strategy": "uniform", "n_clients": 10}``) or
    ``{"plan_path": "plan.json"}``; a plan file indexes into the full
    corpus and must not touch the eval split.

    ``byzantine_clients`` clients (chosen with the seed) send
    sign-flipped, ``byzantine_scale``-amplified updates:
    ``global - scale * (local - global)``.
    """

    model: ModelSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    partition: dict = field(default_factory=lambda: {"strategy": "uniform", "n_clients": 10})
    rounds: int = 30
    eval_split_fraction: float = 0.2
    seed: int = 0
    mode: str = "federated"
    participation_fraction: float = 1.0
    byzantine_clients: int = 0
    byzantine_scale: float = 10.0
    workers: int = 1
    algorithm: str = ""

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 < self.eval_split_fraction < 1:
            raise ConfigError("eval_split_fraction must be in (0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError("participation_fraction must be in (0, 1]")
        if self.byzantine_clients < 0:
            raise ConfigError("byzantine_clients must be >= 0")

    @property
    def algorithm_name(self) -> str:
        if self.algorithm:
            return self.algorithm
        if self.aggregation.kind == "fedavg" and self.train.prox_mu > 0:
            return "fedprox"
        return self.aggregation.kind

    def to_dict(self) -> dict:
        return {
            "model": None if self.model is None else self.model.to_dict(),
            "train": self.train.to_dict(),
            "aggregation": self.aggregation.to_dict(),
            "algorithm": self.algorithm_name,
            "data": self.data,
            "partition": self.partition,
            "rounds": self.rounds,
            "eval_split_fraction": self.eval_split_fraction,
            "seed": self.seed,
            "mode": self.mode,
            "participation_fraction": self.participation_fraction,
            "byzantine_clients": self.byzantine_clients,
            "byzantine_scale": self.byzantine_scale,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        train = TrainConfig.from_dict(raw.pop("train", {}))
        agg_raw = raw.pop("aggregation", "fedavg")
        algorithm = ""
        if isinstance(agg_raw, str):
            agg_raw = {"kind": agg_raw}
        agg_raw = dict(agg_raw)
        if agg_raw.get("kind") == "fedprox":
            # FedProx = FedAvg on the server + proximal clients
            algorithm = "fedprox"
            agg_raw["kind"] = "fedavg"
            if train.prox_mu == 0:
                train = replace(train, prox_mu=float(agg_raw.pop("prox_mu", DEFAULT_PROX_MU)))
        agg_raw.pop("prox_mu", None)
        aggregation = AggregationConfig(**agg_raw)
        model = raw.pop("model", None)
        raw.pop("algorithm", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(
            model=None if model is None else ModelSpec.from_dict(model),
            train=train,
            aggregation=aggregation,
            algorithm=algorithm,
            **raw,
        )


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RoundReport:
    round: int
    global_metrics: dict[str, float]
    per_client_loss: dict[int, float] = field(default_factory=dict)
    participating_clients: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "global_metrics": dict(self.global_metrics),
            "per_client_loss": {str(k): v for k, v in self.per_client_loss.items()},
            "participating_clients": list(self.participating_clients),
        }


@dataclass
class Prepared:
    """Materialised inputs of a run: corpus, eval split, client plan."""

    spec: ModelSpec
    corpus: Dataset
    train_idx: np.ndarray
    eval_idx: np.ndarray
    plan: PartitionPlan

    @property
    def eval_data(self) -> Dataset:
        return self.corpus.subset(self.eval_idx)

    @property
    def train_data(self) -> Dataset:
        return self.corpus.subset(self.train_idx)


def _load_corpus(cfg: ExperimentConfig) -> Dataset:
    if "path" in cfg.data:
        return load_dataset(cfg.data["path"])
    params = {**SYNTHETIC_DEFAULTS, **cfg.data.get("synthetic", {})}
    params.setdefault("seed", derive_seed(cfg.seed, _DATA))
    return make_synthetic_corpus(**params)


def prepare(cfg: ExperimentConfig, corpus: Dataset | None = None) -> Prepared:
    """Build corpus, eval split (first) and client plan (on train indices only)."""
    corpus = corpus if corpus is not None else _load_corpus(cfg)
    spec = cfg.model or ModelSpec("logistic_regression", corpus.feature_dim, corpus.num_classes)
    if spec.feature_dim != corpus.feature_dim or spec.num_classes != corpus.num_classes:
        raise ConfigError("model spec does not match corpus dimensions")
    train_idx, eval_idx = train_eval_split(len(corpus), cfg.eval_split_fraction, derive_seed(cfg.seed, _SPLIT))
    part_seed = int(cfg.partition.get("seed", derive_seed(cfg.seed, _PART)))
    if cfg.mode == "centralized":
        plan = PartitionPlan("single_client", {0: tuple(int(i) for i in train_idx)}, part_seed, {"fraction": 1.0})
    elif "plan_path" in cfg.partition:
        plan = load_plan(cfg.partition["plan_path"])
        plan.validate_against(corpus)
    else:
        train = corpus.subset(train_idx)
        params = {k: v for k, v in cfg.partition.items() if k not in ("strategy", "seed")}
        if cfg.mode == "single_client":
            local = select_single_client(train, float(params.get("fraction", 0.1)), part_seed)
        else:
            local = make_partition(train, cfg.partition.get("strategy", "uniform"), part_seed, **params)
        plan = local.remap(train_idx)
    leaked = set(plan.all_indices()).intersection(eval_idx.tolist())
    if leaked:
        raise ConfigError(f"partition plan uses {len(leaked)} eval-split examples")
    if cfg.mode == "federated" and plan.n_clients < 2:
        raise ConfigError("federated mode needs at least 2 clients")
    if cfg.mode == "single_client" and plan.n_clients != 1:
        raise ConfigError("single_client mode needs a one-client plan")
    return Prepared(spec, corpus, train_idx, eval_idx, plan)


def evaluate(spec: ModelSpec, params: ParameterVector, data: Dataset) -> dict[str, float]:
    preds = predict(spec, params, data.features)
    out = {
        "accuracy": float(np.mean(preds == data.labels)),
        "loss": cross_entropy(spec, params, data.features, data.labels),
    }
    if spec.num_classes == 2:
        out["f1"] = metrics.f1_binary(preds.tolist(), data.labels.tolist())
    return out


class Client:
    """Holds one client's private examples; only parameters leave it."""

    def __init__(self, client_id: int, data: Dataset, spec: ModelSpec, train: TrainConfig, seed: int,
                 byzantine_scale: float | None = None) -> None:
        self.client_id = client_id
        self._data = data
        self._spec = spec
        self._train = train
        self._seed = seed
        self._byzantine_scale = byzantine_scale

    @property
    def num_examples(self) -> int:
        return len(self._data)

    def local_update(self, global_params: ParameterVector, rnd: int) -> ClientUpdate:
        cfg = replace(self._train, seed=derive_seed(self._seed, _TRAIN, rnd, self.client_id))
        params, loss = local_train(self._spec, global_params, self._data, cfg, global_params)
        if self._byzantine_scale is not None:
            flipped = global_params.values - self._byzantine_scale * (params.values - global_params.values)
            params = params.with_values(flipped)
        return ClientUpdate(self.client_id, rnd, params, self.num_examples, loss)


class Server:
    """Aggregation side of the simulation. Sees ClientUpdates only."""

    def __init__(self, aggregation: AggregationConfig, initial: ParameterVector) -> None:
        self.aggregation = aggregation
        self.global_params = initial

    def aggregate(self, updates: Sequence[ClientUpdate]) -> ParameterVector:
        for u in updates:
            if not u.params.compatible_with(self.global_params):
                raise ConfigError(f"client {u.client_id} returned an incompatible layout")
        self.global_params = aggregate(updates, self.aggregation)
        return self.global_params


def _build_clients(cfg: ExperimentConfig, prep: Prepared) -> list[Client]:
    n = prep.plan.n_clients
    k = min(cfg.byzantine_clients, n)
    attackers = set(np.random.default_rng(derive_seed(cfg.seed, _BYZ)).permutation(n)[:k].tolist())
    return [
        Client(
            cid,
            prep.corpus.subset(prep.plan.assignments[cid]),
            prep.spec,
            cfg.train,
            cfg.seed,
            cfg.byzantine_scale if cid in attackers else None,
        )
        for cid in range(n)
    ]


def run_federated(cfg: ExperimentConfig, prepared: Prepared | None = None) -> tuple[ParameterVector, list[RoundReport]]:
    if cfg.mode != "federated":
        raise ConfigError("run_federated requires mode 'federated'")
    prep = prepared or prepare(cfg)
    eval_data = prep.eval_data
    clients = _build_clients(cfg, prep)
    server = Server(cfg.aggregation, init_params(prep.spec, derive_seed(cfg.seed, _INIT)))
    reports: list[RoundReport] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            active = clients
            if cfg.participation_fraction < 1:
                m = max(1, int(round(cfg.participation_fraction * len(clients))))
                pick = np.random.default_rng(derive_seed(cfg.seed, _SAMPLE, rnd)).choice(len(clients), m, replace=False)
                active = [clients[i] for i in sorted(pick)]
            current = server.global_params
            if pool is None:
                updates = [c.local_update(current, rnd) for c in active]
            else:
                updates = list(pool.map(lambda c, g=current, r=rnd: c.local_update(g, r), active))
            new_global = server.aggregate(updates)
            reports.append(
                RoundReport(
                    rnd,
                    evaluate(prep.spec, new_global, eval_data),
                    {u.client_id: u.train_loss for u in updates},
                    tuple(u.client_id for u in updates),
                )
            )
            log.debug("round %d: %s", rnd, reports[-1].global_metrics)
    finally:
        if pool is not None:
            pool.shutdown()
    return server.global_params, reports


def _run_pooled(cfg: ExperimentConfig, prep: Prepared) -> tuple[ParameterVector, list[RoundReport]]:
    (idx,) = prep.plan.assignments.values()
    data = prep.corpus.subset(idx)
    eval_data = prep.eval_data
    start = init_params(prep.spec, derive_seed(cfg.seed, _INIT))
    train_cfg = replace(cfg.train, epochs=cfg.rounds, seed=derive_seed(cfg.seed, _TRAIN))
    reports: list[RoundReport] = []

    def record(epoch: int, params: ParameterVector, loss: float) -> None:
        reports.append(RoundReport(epoch + 1, evaluate(prep.spec, params, eval_data), {0: loss}, (0,)))

    final, _ = local_train(prep.spec, start, data, train_cfg, start, on_epoch_end=record)
    return final, reports


def run_centralized(cfg: ExperimentConfig, prepared: Prepared | None = None) -> tuple[ParameterVector, list[RoundReport]]:
    """One model on all training data; ``rounds`` epochs, one report per epoch."""
    if cfg.mode != "centralized":
        raise ConfigError("run_centralized requires mode 'centralized'")
    return _run_pooled(cfg, prepared or prepare(cfg))


def run_single_client(cfg: ExperimentConfig, prepared: Prepared | None = None) -> tuple[ParameterVector, list[RoundReport]]:
    """Same loop as the centralized baseline, restricted to one client's sample."""
    if cfg.mode != "single_client":
        raise ConfigError("run_single_client requires mode 'single_client'")
    return _run_pooled(cfg, prepared or prepare(cfg))


def run_experiment(cfg: ExperimentConfig, prepared: Prepared | None = None) -> tuple[ParameterVector, list[RoundReport]]:
    runner = {"federated": run_federated, "centralized": run_centralized, "single_client": run_single_client}[cfg.mode]
    return runner(cfg, prepared)


def final_metric(reports: Sequence[RoundReport], name: str = "accuracy") -> float:
    return reports[-1].global_metrics[name]


# -- comparison tables -------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    metrics: dict[str, float]
    delta: dict[str, float]


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    metric_names: tuple[str, ...]
    rows: tuple[ComparisonRow, ...]

    def render(self) -> str:
        header = ["run"] + [f"{m}" for m in self.metric_names] + [f"d_{m}" for m in self.metric_names]
        lines = [header] + [
            [r.label] + [f"{r.metrics[m]:.4f}" for m in self.metric_names] + [f"{r.delta[m]:+.4f}" for m in self.metric_names]
            for r in self.rows
        ]
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", *self.metric_names, *(f"delta_{m}" for m in self.metric_names)])
        for r in self.rows:
            w.writerow([r.label, *(repr(r.metrics[m]) for m in self.metric_names), *(repr(r.delta[m]) for m in self.metric_names)])
        return buf.getvalue()


def compare_runs(runs: Sequence[tuple[str, Sequence[RoundReport]]], baseline: str = "centralized") -> ComparisonTable:
    """Final-round metrics per labelled run with deltas against ``baseline``.

    Falls back to the first run as the reference when no run carries the
    baseline label.
    """
    if not runs:
        raise ValueError("nothing to compare")
    names = None
    for label, reports in runs:
        if not reports:
            raise ValueError(f"run {label!r} has no reports")
        keys = tuple(sorted(reports[-1].global_metrics))
        if names is None:
            names = keys
        elif keys != names:
            raise ValueError(f"run {label!r} reports metrics {keys}, expected {names}")
    labels = [label for label, _ in runs]
    ref_label = baseline if baseline in labels else labels[0]
    ref = dict(runs[labels.index(ref_label)][1][-1].global_metrics)
    rows = tuple(
        ComparisonRow(label, dict(reports[-1].global_metrics), {m: reports[-1].global_metrics[m] - ref[m] for m in names})
        for label, reports in runs
    )
    return ComparisonTable(ref_label, names, rows)


# -- report files ------------------------------------------------------------


def reports_jsonl(reports: Sequence[RoundReport]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports)


def reports_csv(reports: Sequence[RoundReport]) -> str:
    metric_names = sorted({m for r in reports for m in r.global_metrics})
    client_ids = sorted({c for r in reports for c in r.per_client_loss})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", *metric_names, "participating_clients", *(f"client_{c}_loss" for c in client_ids)])
    for r in reports:
        w.writerow(
            [
                r.round,
                *(repr(r.global_metrics[m]) if m in r.global_metrics else "" for m in metric_names),
                " ".join(str(c) for c in r.participating_clients),
                *(repr(r.per_client_loss[c]) if c in r.per_client_loss else "" for c in client_ids),
            ]
        )
    return buf.getvalue()


def write_run(out_dir: str | Path, cfg: ExperimentConfig, spec: ModelSpec, params: ParameterVector,
              reports: Sequence[RoundReport]) -> dict[str, Path]:
    """Write reports (JSONL + CSV), the resolved config and the final checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_layout(spec, params)
    paths = {
        "jsonl": out / "reports.jsonl",
        "csv": out / "reports.csv",
        "config": out / "config.resolved.json",
        "checkpoint": out / "final_params.json",
    }
    paths["jsonl"].write_text(reports_jsonl(reports), encoding="utf-8")
    paths["csv"].write_text(reports_csv(reports), encoding="utf-8")
    paths["config"].write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    save_checkpoint(paths["checkpoint"], spec, params)
    return paths
