"""Versioned model registry with pull-request style contributions.

Layout of a registry directory::

    registry.json          spec, gate config, merge settings
    benchmark.json         gate benchmark dataset (copied in at init)
    versions.jsonl         one ModelVersion per line (append-only)
    contributions.jsonl    submit / gate / decide events (append-only)
    ledger.jsonl           contribution-token awards (append-only)
    checkpoints/           v<id>.json, accepted model checkpoints
    updates/               c<id>.json, submitted parameter checkpoints
    candidates/            c<id>.json, merged candidates built by the gate
    testsets/              c<id>.json, contributor-supplied test sets

Every JSONL line is ``{"record": {...}, "sha256": <hex of canonical record>}``.
Reads verify record checksums, checkpoint hashes and parent links, and raise
:class:`RegistryCorruption` on any mismatch. Mutations take a lock file so
only one writer is active at a time.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from collections.abc import Callable
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock

from .aggregation import AggregationConfig, ClientUpdate, aggregate
from .core_model import (
    LayoutError,
    ModelSpec,
    ParameterVector,
    check_layout,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .metrics import accuracy, f1_binary
from .partition import Dataset, load_dataset, save_dataset

FORMAT_VERSION = 1
DEFAULT_TOKEN_AMOUNT = 10


class RegistryError(Exception):
    pass


class RegistryExists(RegistryError):
    pass


class StaleBaseError(RegistryError):
    pass


class GateError(RegistryError):
    pass


class RegistryCorruption(RegistryError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_sha(path: Path) -> str:
    return _sha256(path.read_bytes())


def _append_record(path: Path, record: dict) -> None:
    line = json.dumps({"record": record, "sha256": _sha256(_canonical(record))}, sort_keys=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def _read_records(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            wrapped = json.loads(line)
            record, digest = wrapped["record"], wrapped["sha256"]
        except (ValueError, KeyError, TypeError) as exc:
            raise RegistryCorruption(f"{path.name}:{lineno}: unreadable record ({exc})") from exc
        if _sha256(_canonical(record)) != digest:
            raise RegistryCorruption(f"{path.name}:{lineno}: checksum mismatch")
        out.append(record)
    return out


@dataclass(frozen=True)
class GateConfig:
    benchmark_dataset_ref: str
    primary_metric: str = "accuracy"
    min_score: float = 0.8
    no_regression_metrics: tuple[str, ...] = ("accuracy",)
    regression_tolerance: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "no_regression_metrics", tuple(self.no_regression_metrics))
        if self.regression_tolerance < 0:
            raise ValueError("regression_tolerance must be nonnegative")

    @classmethod
    def from_dict(cls, raw: dict) -> GateConfig:
        return cls(**raw)


@dataclass(frozen=True)
class ModelVersion:
    version_id: int
    parent: int | None
    checkpoint_ref: str
    checkpoint_sha256: str
    spec: dict
    benchmark_scores: dict[str, float]
    contributor: str
    created_at: str
    notes: str = ""
    contribution_id: int | None = None
    accumulated_examples: int = 0


@dataclass
class Contribution:
    contribution_id: int
    contributor: str
    base_version: int
    update_ref: str
    claimed_num_examples: int
    new_test_set_ref: str | None = None
    notes: str = ""
    status: str = "pending"
    gate_report: dict | None = None
    reviewer: str | None = None


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    contributor: str
    contribution_id: int
    tokens: int
    reason: str


class Ledger:
    """Append-only token ledger; balances are always the fold of the events."""

    def __init__(self, path: str | Path, is_accepted: Callable[[int], bool] | None = None) -> None:
        self.path = Path(path)
        self._is_accepted = is_accepted

    def events(self) -> list[LedgerEvent]:
        return [LedgerEvent(**r) for r in _read_records(self.path)]

    def balances(self) -> dict[str, int]:
        return fold_balances(self.events())

    def balance(self, contributor: str) -> int:
        return self.balances().get(contributor, 0)

    def award(self, contributor: str, contribution_id: int, amount: int, reason: str = "accepted contribution") -> LedgerEvent:
        if int(amount) != amount or amount < 1:
            raise ValueError("token amount must be a positive integer")
        if self._is_accepted is not None and not self._is_accepted(contribution_id):
            raise RegistryError(f"contribution {contribution_id} is not accepted")
        event = LedgerEvent(len(self.events()), contributor, contribution_id, int(amount), reason)
        _append_record(self.path, asdict(event))
        return event


def fold_balances(events) -> dict[str, int]:
    balances: dict[str, int] = {}
    for e in events:
        balances[e.contributor] = balances.get(e.contributor, 0) + e.tokens
    return balances


def award_tokens(ledger: Ledger, contributor: str, contribution_id: int, amount: int,
                 reason: str = "accepted contribution") -> LedgerEvent:
    return ledger.award(contributor, contribution_id, amount, reason)


def benchmark_scores(spec: ModelSpec, params: ParameterVector, data: Dataset, prefix: str = "") -> dict[str, float]:
    preds = predict(spec, params, data.features).tolist()
    golds = data.labels.tolist()
    scores = {f"{prefix}accuracy": accuracy(preds, golds)}
    if spec.num_classes == 2:
        scores[f"{prefix}f1"] = f1_binary(preds, golds)
    return scores


class Registry:
    """Handle on a registry directory. Create with :func:`registry_init`, reopen with ``Registry(path)``."""

    def __init__(self, root: str | Path, clock: Callable[[], str] = _utc_now) -> None:
        self.root = Path(root)
        meta_path = self.root / "registry.json"
        if not meta_path.exists():
            raise RegistryError(f"no registry at {self.root}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise RegistryCorruption("unsupported registry format")
        body = {k: v for k, v in meta.items() if k != "sha256"}
        if _sha256(_canonical(body)) != meta.get("sha256"):
            raise RegistryCorruption("registry.json checksum mismatch")
        self.spec = ModelSpec.from_dict(meta["spec"])
        self.gate = GateConfig.from_dict(meta["gate"])
        self.merge = AggregationConfig(**meta["merge"])
        self.token_amount = int(meta["token_amount"])
        self.clock = clock
        self.ledger = Ledger(self.root / "ledger.jsonl", self._accepted)
        self._lock = FileLock(str(self.root / ".lock"))
        self.versions()  # verify on open

    # -- reads ---------------------------------------------------------------

    def versions(self) -> list[ModelVersion]:
        versions = [ModelVersion(**r) for r in _read_records(self.root / "versions.jsonl")]
        if not versions:
            raise RegistryCorruption("registry has no genesis version")
        for i, v in enumerate(versions):
            if v.version_id != i:
                raise RegistryCorruption(f"version ids out of sequence at position {i}")
            expected_parent = None if i == 0 else i - 1
            if v.parent != expected_parent:
                raise RegistryCorruption(f"version {i} has parent {v.parent}, expected {expected_parent}")
            if v.spec != self.spec.to_dict():
                raise RegistryCorruption(f"version {i} spec differs from registry spec")
            ckpt = self.root / v.checkpoint_ref
            if not ckpt.exists() or _file_sha(ckpt) != v.checkpoint_sha256:
                raise RegistryCorruption(f"checkpoint of version {i} missing or modified")
            if i > 0 and not v.benchmark_scores:
                raise RegistryCorruption(f"version {i} has no benchmark scores")
        return versions

    def head(self) -> ModelVersion:
        return self.versions()[-1]

    def params(self, version_id: int | None = None) -> ParameterVector:
        versions = self.versions()
        v = versions[-1] if version_id is None else versions[version_id]
        _, params = load_checkpoint(self.root / v.checkpoint_ref)
        return params

    def benchmark(self) -> Dataset:
        return load_dataset(self.root / "benchmark.json")

    def contributions(self) -> dict[int, Contribution]:
        out: dict[int, Contribution] = {}
        for ev in _read_records(self.root / "contributions.jsonl"):
            kind = ev["event"]
            cid = ev["contribution_id"]
            if kind == "submit":
                if cid in out:
                    raise RegistryCorruption(f"contribution {cid} submitted twice")
                out[cid] = Contribution(**{k: v for k, v in ev.items() if k != "event"})
                continue
            if cid not in out:
                raise RegistryCorruption(f"event for unknown contribution {cid}")
            c = out[cid]
            if kind == "gate":
                c.gate_report = ev["report"]
            elif kind == "decide":
                if c.status != "pending":
                    raise RegistryCorruption(f"contribution {cid} decided twice")
                c.status = ev["status"]
                c.reviewer = ev["reviewer"]
            else:
                raise RegistryCorruption(f"unknown event {kind!r}")
        return out

    def contribution(self, contribution_id: int) -> Contribution:
        try:
            return self.contributions()[contribution_id]
        except KeyError:
            raise RegistryError(f"no contribution {contribution_id}") from None

    def _accepted(self, contribution_id: int) -> bool:
        c = self.contributions().get(contribution_id)
        return c is not None and c.status == "accepted"

    def history(self) -> list[tuple[ModelVersion, Contribution | None]]:
        contributions = self.contributions()
        out = []
        for v in self.versions():
            c = contributions.get(v.contribution_id) if v.contribution_id is not None else None
            if v.version_id > 0 and (c is None or c.status != "accepted"):
                raise RegistryCorruption(f"version {v.version_id} does not link to an accepted contribution")
            out.append((v, c))
        return out

    def balances(self) -> dict[str, int]:
        return self.ledger.balances()

    def evaluate(self, params: ParameterVector, test_set: Dataset | None = None) -> dict[str, float]:
        scores = benchmark_scores(self.spec, params, self.benchmark())
        if test_set is not None:
            scores.update(benchmark_scores(self.spec, params, test_set, prefix="new_test_"))
        return scores

    # -- writes --------------------------------------------------------------

    def submit(
        self,
        contributor: str,
        base_version: int,
        update: ParameterVector,
        claimed_num_examples: int,
        new_test_set: Dataset | None = None,
        notes: str = "",
    ) -> int:
        """Store a pending contribution against the current head."""
        if not contributor:
            raise ValueError("contributor must be nonempty")
        if claimed_num_examples < 1:
            raise ValueError("claimed_num_examples must be positive")
        try:
            check_layout(self.spec, update)
        except LayoutError as exc:
            raise LayoutError(f"contribution does not match registry model: {exc}") from None
        with self._lock:
            head = self.head()
            if base_version != head.version_id:
                raise StaleBaseError(f"base version {base_version} is not the head ({head.version_id})")
            cid = len(self.contributions())
            update_ref = f"updates/c{cid}.json"
            save_checkpoint(self.root / update_ref, self.spec, update)
            test_ref = None
            if new_test_set is not None:
                if new_test_set.feature_dim != self.spec.feature_dim or new_test_set.num_classes != self.spec.num_classes:
                    raise ValueError("new test set does not match the registry model")
                test_ref = f"testsets/c{cid}.json"
                save_dataset(self.root / test_ref, new_test_set)
            record = asdict(Contribution(cid, contributor, base_version, update_ref, int(claimed_num_examples), test_ref, notes))
            record.pop("gate_report")
            record.pop("reviewer")
            _append_record(self.root / "contributions.jsonl", {"event": "submit", **record})
        return cid

    def _candidate(self, head: ModelVersion, contribution: Contribution) -> ParameterVector:
        head_params = self.params(head.version_id)
        _, update = load_checkpoint(self.root / contribution.update_ref)
        updates = [
            ClientUpdate(0, head.version_id, head_params, max(head.accumulated_examples, 1)),
            ClientUpdate(1, head.version_id, update, contribution.claimed_num_examples),
        ]
        return aggregate(updates, self.merge)

    def evaluate_gate(self, contribution_id: int) -> dict:
        """Merge the contribution into head, score before/after, record PASS/FAIL."""
        with self._lock:
            c = self.contribution(contribution_id)
            if c.status != "pending":
                raise GateError(f"contribution {contribution_id} is {c.status}, not pending")
            head = self.head()
            if c.base_version != head.version_id:
                raise StaleBaseError(f"contribution {contribution_id} is based on {c.base_version}, head is {head.version_id}")
            if not (self.root / "benchmark.json").exists():
                raise GateError("gate benchmark dataset is missing")
            test_set = load_dataset(self.root / c.new_test_set_ref) if c.new_test_set_ref else None
            candidate = self._candidate(head, c)
            before = self.evaluate(self.params(head.version_id), test_set)
            after = self.evaluate(candidate, test_set)
            if self.gate.primary_metric not in after:
                raise GateError(f"primary metric {self.gate.primary_metric!r} is not evaluated")
            reasons = []
            if after[self.gate.primary_metric] < self.gate.min_score:
                reasons.append(f"{self.gate.primary_metric} {after[self.gate.primary_metric]:.4f} < {self.gate.min_score}")
            for m in self.gate.no_regression_metrics:
                if m not in after:
                    raise GateError(f"no-regression metric {m!r} is not evaluated")
                if before[m] - after[m] > self.gate.regression_tolerance:
                    reasons.append(f"{m} regressed {before[m]:.4f} -> {after[m]:.4f}")
            cand_ref = f"candidates/c{contribution_id}.json"
            save_checkpoint(self.root / cand_ref, self.spec, candidate)
            report = {
                "metrics": {m: [before[m], after[m]] for m in sorted(after)},
                "passed": not reasons,
                "reasons": reasons,
                "head_version": head.version_id,
                "candidate_ref": cand_ref,
                "candidate_sha256": _file_sha(self.root / cand_ref),
            }
            _append_record(self.root / "contributions.jsonl", {"event": "gate", "contribution_id": contribution_id, "report": report})
        return report

    def decide(self, contribution_id: int, verdict: str, reviewer: str) -> ModelVersion | None:
        """Record the committee verdict; an accept creates the next head version and awards tokens."""
        if verdict not in ("accept", "reject"):
            raise ValueError("verdict must be 'accept' or 'reject'")
        with self._lock:
            c = self.contribution(contribution_id)
            if c.status != "pending":
                raise RegistryError(f"contribution {contribution_id} was already {c.status}")
            if c.gate_report is None:
                raise GateError(f"contribution {contribution_id} has not been through the gate")
            if verdict == "reject":
                _append_record(
                    self.root / "contributions.jsonl",
                    {"event": "decide", "contribution_id": contribution_id, "status": "rejected", "reviewer": reviewer},
                )
                return None
            if not c.gate_report["passed"]:
                raise GateError(f"contribution {contribution_id} failed the gate: {'; '.join(c.gate_report['reasons'])}")
            head = self.head()
            if c.base_version != head.version_id or c.gate_report["head_version"] != head.version_id:
                raise StaleBaseError(f"contribution {contribution_id} is stale; head is now {head.version_id}")
            cand = self.root / c.gate_report["candidate_ref"]
            if _file_sha(cand) != c.gate_report["candidate_sha256"]:
                raise RegistryCorruption("gate candidate checkpoint was modified")
            new_id = head.version_id + 1
            ckpt_ref = f"checkpoints/v{new_id}.json"
            shutil.copyfile(cand, self.root / ckpt_ref)
            version = ModelVersion(
                version_id=new_id,
                parent=head.version_id,
                checkpoint_ref=ckpt_ref,
                checkpoint_sha256=_file_sha(self.root / ckpt_ref),
                spec=self.spec.to_dict(),
                benchmark_scores={m: after for m, (_, after) in c.gate_report["metrics"].items()},
                contributor=c.contributor,
                created_at=self.clock(),
                notes=c.notes,
                contribution_id=contribution_id,
                accumulated_examples=head.accumulated_examples + c.claimed_num_examples,
            )
            _append_record(
                self.root / "contributions.jsonl",
                {"event": "decide", "contribution_id": contribution_id, "status": "accepted", "reviewer": reviewer},
            )
            _append_record(self.root / "versions.jsonl", asdict(version))
            self.ledger.award(c.contributor, contribution_id, self.token_amount)
        return version

    def award_tokens(self, contributor: str, contribution_id: int, amount: int, reason: str = "bonus") -> LedgerEvent:
        with self._lock:
            return self.ledger.award(contributor, contribution_id, amount, reason)

    def reevaluate(self, version_id: int) -> dict[str, float]:
        """Benchmark scores of a stored version, recomputed from its checkpoint."""
        return benchmark_scores(self.spec, self.params(version_id), self.benchmark())


def registry_init(
    root: str | Path,
    spec: ModelSpec,
    genesis_params: ParameterVector,
    gate: GateConfig,
    genesis_examples: int = 1,
    merge: AggregationConfig | None = None,
    token_amount: int = DEFAULT_TOKEN_AMOUNT,
    contributor: str = "founders",
    notes: str = "genesis",
    clock: Callable[[], str] = _utc_now,
) -> Registry:
    """Create a registry directory holding the genesis version (id 0)."""
    root = Path(root)
    if (root / "registry.json").exists():
        raise RegistryExists(f"registry already exists at {root}")
    check_layout(spec, genesis_params)
    if genesis_examples < 1:
        raise ValueError("genesis_examples must be positive")
    if token_amount < 1:
        raise ValueError("token_amount must be positive")
    benchmark = load_dataset(gate.benchmark_dataset_ref)
    if benchmark.feature_dim != spec.feature_dim or benchmark.num_classes != spec.num_classes:
        raise ValueError("benchmark dataset does not match the model spec")
    scores = benchmark_scores(spec, genesis_params, benchmark)
    if gate.primary_metric not in scores:
        raise ValueError(f"primary metric {gate.primary_metric!r} is not among evaluated metrics {sorted(scores)}")
    merge = merge or AggregationConfig("fedavg")
    for sub in ("checkpoints", "updates", "candidates", "testsets"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_dataset(root / "benchmark.json", benchmark)
    save_checkpoint(root / "checkpoints/v0.json", spec, genesis_params)
    genesis = ModelVersion(
        version_id=0,
        parent=None,
        checkpoint_ref="checkpoints/v0.json",
        checkpoint_sha256=_file_sha(root / "checkpoints/v0.json"),
        spec=spec.to_dict(),
        benchmark_scores=scores,
        contributor=contributor,
        created_at=clock(),
        notes=notes,
        accumulated_examples=int(genesis_examples),
    )
    _append_record(root / "versions.jsonl", asdict(genesis))
    (root / "contributions.jsonl").touch()
    (root / "ledger.jsonl").touch()
    meta = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        # the benchmark is copied into the registry, so the stored ref is relative to it
        "gate": {**asdict(gate), "benchmark_dataset_ref": "benchmark.json",
                 "no_regression_metrics": list(gate.no_regression_metrics)},
        "merge": merge.to_dict(),
        "token_amount": int(token_amount),
    }
    meta["sha256"] = _sha256(_canonical(meta))
    (root / "registry.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return Registry(root, clock=clock)


def submit_contribution(registry: Registry, contributor: str, base_version: int, update: ParameterVector,
                        claimed_num_examples: int, new_test_set: Dataset | None = None, notes: str = "") -> int:
    return registry.submit(contributor, base_version, update, claimed_num_examples, new_test_set, notes)


def evaluate_gate(registry: Registry, contribution_id: int) -> dict:
    return registry.evaluate_gate(contribution_id)


def decide(registry: Registry, contribution_id: int, verdict: str, reviewer: str) -> ModelVersion | None:
    return registry.decide(contribution_id, verdict, reviewer)


def history(registry: Registry) -> list[tuple[ModelVersion, Contribution | None]]:
    return registry.history()
