"""Client data partitioning strategies and a synthetic labelled corpus.

All strategies return a :class:`PartitionPlan` that stores example
indices into the source :class:`Dataset`, never copies of the examples.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STRATEGIES = ("uniform", "label_imbalanced", "quantity_imbalanced", "by_repository", "single_client")


class PartitionError(ValueError):
    """The requested partition cannot be built from the given corpus."""


@dataclass(frozen=True)
class LabeledExample:
    features: tuple[float, ...]
    label: int
    repo_owner: str


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented labelled corpus.

    Iterating yields :class:`LabeledExample` records; training code reads
    ``features`` / ``labels`` directly.
    """

    features: np.ndarray
    labels: np.ndarray
    owners: tuple[str, ...]
    num_classes: int

    def __post_init__(self) -> None:
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise ValueError("dataset must be nonempty with a positive feature dimension")
        if y.shape != (x.shape[0],) or len(self.owners) != x.shape[0]:
            raise ValueError("features, labels and owners must have equal length")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError("label out of range")
        if any(not o for o in self.owners):
            raise ValueError("repo_owner tags must be nonempty")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "owners", tuple(str(o) for o in self.owners))

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return int(self.labels.size)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(tuple(float(v) for v in self.features[i]), int(self.labels[i]), self.owners[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], tuple(self.owners[i] for i in idx), self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def from_examples(cls, examples: Iterable[LabeledExample], num_classes: int) -> Dataset:
        examples = list(examples)
        if not examples:
            raise ValueError("dataset must be nonempty")
        return cls(
            np.array([e.features for e in examples], dtype=np.float64),
            np.array([e.label for e in examples], dtype=np.int64),
            tuple(e.repo_owner for e in examples),
            num_classes,
        )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "examples": [
                {"features": [float(v) for v in self.features[i]], "label": int(self.labels[i]), "repo_owner": self.owners[i]}
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> Dataset:
        exs = raw["examples"]
        ds = cls(
            np.array([e["features"] for e in exs], dtype=np.float64),
            np.array([e["label"] for e in exs], dtype=np.int64),
            tuple(e["repo_owner"] for e in exs),
            int(raw["num_classes"]),
        )
        if "feature_dim" in raw and int(raw["feature_dim"]) != ds.feature_dim:
            raise ValueError("feature_dim does not match example features")
        return ds


def save_dataset(path: str | Path, data: Dataset) -> None:
    Path(path).write_text(json.dumps(data.to_dict()) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    return Dataset.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PartitionPlan:
    strategy: str
    assignments: dict[int, tuple[int, ...]]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        clean = {int(k): tuple(int(i) for i in v) for k, v in sorted(self.assignments.items())}
        if sorted(clean) != list(range(len(clean))):
            raise ValueError("client ids must be 0..n_clients-1")
        seen: set[int] = set()
        for cid, idx in clean.items():
            if not idx:
                raise ValueError(f"client {cid} has no examples")
            if seen.intersection(idx) or len(set(idx)) != len(idx):
                raise ValueError("client assignments overlap")
            seen.update(idx)
        object.__setattr__(self, "assignments", clean)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(self.assignments[c]) for c in range(self.n_clients)]

    def all_indices(self) -> list[int]:
        return [i for c in range(self.n_clients) for i in self.assignments[c]]

    def validate_against(self, data: Dataset) -> None:
        n = len(data)
        for idx in self.assignments.values():
            if min(idx) < 0 or max(idx) >= n:
                raise ValueError("plan references indices outside the dataset")
        if self.strategy == "by_repository":
            owner_client: dict[str, int] = {}
            for cid, idx in self.assignments.items():
                for i in idx:
                    if owner_client.setdefault(data.owners[i], cid) != cid:
                        raise ValueError(f"owner {data.owners[i]!r} spans clients")

    def remap(self, index_map: Sequence[int] | np.ndarray) -> PartitionPlan:
        """Translate indices through ``index_map`` (e.g. from a train split back to the corpus)."""
        index_map = np.asarray(index_map)
        return PartitionPlan(
            self.strategy,
            {c: tuple(int(index_map[i]) for i in idx) for c, idx in self.assignments.items()},
            self.seed,
            dict(self.params),
        )

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "params": self.params,
            "assignments": {str(c): list(idx) for c, idx in self.assignments.items()},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> PartitionPlan:
        return cls(
            raw["strategy"],
            {int(c): tuple(v) for c, v in raw["assignments"].items()},
            int(raw["seed"]),
            dict(raw.get("params", {})),
        )


def save_plan(path: str | Path, plan: PartitionPlan) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> PartitionPlan:
    return PartitionPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _plan(strategy: str, buckets: Sequence[Iterable[int]], seed: int, **params) -> PartitionPlan:
    return PartitionPlan(strategy, {c: tuple(sorted(int(i) for i in b)) for c, b in enumerate(buckets)}, seed, params)


def _check_clients(data: Dataset, n_clients: int) -> None:
    if n_clients < 2:
        raise PartitionError("need at least 2 clients")
    if len(data) < n_clients:
        raise PartitionError(f"{len(data)} examples cannot fill {n_clients} clients")


def _shuffled_by_class(data: Dataset, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(data.labels == c)) for c in range(data.num_classes)]


def _largest_remainder(target: np.ndarray, total: int) -> np.ndarray:
    """Round a nonnegative real vector to integers summing to ``total``."""
    base = np.floor(target).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable sort: ties go to the lower index
        order = np.argsort(-(target - base), kind="stable")
        base[order[:short]] += 1
    return base


def _round_matrix(x: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray) -> np.ndarray:
    """Integer matrix close to ``x`` with exactly the given row and column sums."""
    out = np.floor(x).astype(np.int64)
    row_def = row_sums - out.sum(axis=1)
    col_def = col_sums - out.sum(axis=0)
    frac = x - out
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        r, c = divmod(int(flat), x.shape[1])
        if row_def[r] > 0 and col_def[c] > 0:
            out[r, c] += 1
            row_def[r] -= 1
            col_def[c] -= 1
    # leftovers (rare): pair remaining row and column deficits directly
    for r in np.flatnonzero(row_def > 0):
        for c in np.flatnonzero(col_def > 0):
            take = min(row_def[r], col_def[c])
            out[r, c] += take
            row_def[r] -= take
            col_def[c] -= take
    assert not row_def.any() and not col_def.any()
    return out


def _deal(per_class: list[np.ndarray], counts: np.ndarray) -> list[list[int]]:
    """Hand out shuffled class pools according to a client x class count matrix."""
    buckets: list[list[int]] = [[] for _ in range(counts.shape[0])]
    for c, pool in enumerate(per_class):
        offset = 0
        for k in range(counts.shape[0]):
            take = int(counts[k, c])
            buckets[k].extend(pool[offset : offset + take].tolist())
            offset += take
    return buckets


def partition_uniform(data: Dataset, n_clients: int, seed: int) -> PartitionPlan:
    """Stratified round-robin split: sizes differ by at most one, label mix ~ global."""
    _check_clients(data, n_clients)
    rng = np.random.default_rng(seed)
    stream = np.concatenate(_shuffled_by_class(data, rng))
    # random client order so the remainder examples do not always land on client 0
    client_order = rng.permutation(n_clients)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for pos, idx in enumerate(stream):
        buckets[client_order[pos % n_clients]].append(int(idx))
    return _plan("uniform", buckets, seed, n_clients=n_clients)


def _client_sizes_equal(n: int, n_clients: int) -> np.ndarray:
    return _largest_remainder(np.full(n_clients, n / n_clients), n)


def _sinkhorn(mat: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray, iters: int = 2000) -> np.ndarray:
    x = mat.copy()
    for _ in range(iters):
        x *= (row_sums / x.sum(axis=1))[:, None]
        x *= col_sums / x.sum(axis=0)
        if np.allclose(x.sum(axis=1), row_sums, rtol=1e-10, atol=1e-9):
            break
    return x


def partition_label_imbalanced(data: Dataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Dirichlet(alpha) label skew with (near) equal client sizes.

    Each client draws a class mixture from Dirichlet(alpha). The mixtures
    are scaled to the client sizes and then fitted to the available class
    counts with iterative proportional fitting, so the whole corpus is
    used and every client ends up with the same number of examples
    (+/- 1). Small alpha keeps the fitted mixtures strongly skewed.
    """
    _check_clients(data, n_clients)
    if not alpha > 0:
        raise PartitionError("alpha must be positive")
    counts = data.label_counts()
    small = [c for c in range(data.num_classes) if counts[c] < n_clients]
    if small:
        raise PartitionError(f"classes {small} have fewer than {n_clients} examples")
    rng = np.random.default_rng(seed)
    per_class = _shuffled_by_class(data, rng)
    present = counts > 0
    mix = rng.dirichlet(np.full(int(present.sum()), alpha), size=n_clients)
    mix = np.maximum(mix, 1e-12)
    sizes = _client_sizes_equal(len(data), n_clients)
    target = np.zeros((n_clients, data.num_classes))
    target[:, present] = _sinkhorn(mix * sizes[:, None], sizes.astype(float), counts[present].astype(float))
    alloc = _round_matrix(target, sizes, counts)
    return _plan("label_imbalanced", _deal(per_class, alloc), seed, n_clients=n_clients, alpha=alpha)


def partition_quantity_imbalanced(data: Dataset, n_clients: int, size_ratio: float, seed: int) -> PartitionPlan:
    """Geometric client sizes (largest/smallest = ``size_ratio``), label mix ~ global."""
    _check_clients(data, n_clients)
    if not size_ratio > 1:
        raise PartitionError("size_ratio must exceed 1")
    n = len(data)
    growth = size_ratio ** (np.arange(n_clients) / (n_clients - 1))
    sizes = _largest_remainder(growth * n / growth.sum(), n)
    counts = data.label_counts()
    present = counts > 0
    rng = np.random.default_rng(seed)
    per_class = _shuffled_by_class(data, rng)
    target = sizes[:, None] * (counts / n)[None, :]
    alloc = _round_matrix(target, sizes, counts)
    if (alloc[:, present] < 1).any():
        raise PartitionError(f"ratio {size_ratio} leaves the smallest client without every class; corpus too small")
    # random client ids so the largest client is not always the last one
    perm = rng.permutation(n_clients)
    buckets = _deal(per_class, alloc)
    return _plan(
        "quantity_imbalanced", [buckets[k] for k in perm], seed, n_clients=n_clients, size_ratio=size_ratio
    )


def partition_by_repository(data: Dataset, n_clients: int, seed: int) -> PartitionPlan:
    """Whole owners per client, largest owners placed first onto the smallest client.

    Owners are shuffled with the seed (which only breaks ties between
    equally sized owners), ordered by example count descending, and each
    is assigned to the client currently holding the fewest examples
    (lowest client id on ties).
    """
    owners: dict[str, list[int]] = {}
    for i, o in enumerate(data.owners):
        owners.setdefault(o, []).append(i)
    if n_clients < 1:
        raise PartitionError("need at least 1 client")
    if len(owners) < n_clients:
        raise PartitionError(f"{len(owners)} repository owners cannot fill {n_clients} clients")
    rng = np.random.default_rng(seed)
    names = sorted(owners)
    names = [names[i] for i in rng.permutation(len(names))]
    names.sort(key=lambda o: -len(owners[o]))
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for o in names:
        target = min(range(n_clients), key=lambda k: (len(buckets[k]), k))
        buckets[target].extend(owners[o])
    return _plan("by_repository", buckets, seed, n_clients=n_clients)


def select_single_client(data: Dataset, fraction: float, seed: int) -> PartitionPlan:
    if not 0 < fraction <= 1:
        raise PartitionError("fraction must be in (0, 1]")
    k = int(round(fraction * len(data)))
    if k < 1:
        raise PartitionError("selection would be empty")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(data), size=k, replace=False)
    return _plan("single_client", [chosen], seed, fraction=fraction)


def make_partition(data: Dataset, strategy: str, seed: int, **params) -> PartitionPlan:
    """Dispatch on strategy name; used by config-driven callers."""
    n_clients = int(params.get("n_clients", 10))
    if strategy == "uniform":
        return partition_uniform(data, n_clients, seed)
    if strategy == "label_imbalanced":
        return partition_label_imbalanced(data, n_clients, float(params.get("alpha", 0.5)), seed)
    if strategy == "quantity_imbalanced":
        return partition_quantity_imbalanced(data, n_clients, float(params.get("size_ratio", 4.0)), seed)
    if strategy == "by_repository":
        return partition_by_repository(data, n_clients, seed)
    if strategy == "single_client":
        return select_single_client(data, float(params.get("fraction", 0.1)), seed)
    raise PartitionError(f"unknown strategy {strategy!r}")


def label_distribution(data: Dataset, indices: Sequence[int]) -> np.ndarray:
    counts = np.bincount(data.labels[np.asarray(indices, dtype=np.int64)], minlength=data.num_classes)
    return counts / counts.sum()


def mean_label_tv_distance(data: Dataset, plan: PartitionPlan) -> float:
    """Average total-variation distance between client and global label mixes."""
    glob = data.label_counts() / len(data)
    dists = [0.5 * np.abs(label_distribution(data, idx) - glob).sum() for idx in plan.assignments.values()]
    return float(np.mean(dists))


# -- synthetic corpus --------------------------------------------------------

SYNTHETIC_DEFAULTS = dict(
    n_examples=10_000,
    feature_dim=80,
    num_classes=4,
    n_owners=50,
    cluster_spread=1.0,
)


def _linear_rule_accuracy(x: np.ndarray, y: np.ndarray, class_centers: np.ndarray) -> float:
    scores = x @ class_centers.T - 0.5 * np.sum(class_centers**2, axis=1)
    return float(np.mean(np.argmax(scores, axis=1) == y))


def make_synthetic_corpus(
    n_examples: int = SYNTHETIC_DEFAULTS["n_examples"],
    feature_dim: int = SYNTHETIC_DEFAULTS["feature_dim"],
    num_classes: int = SYNTHETIC_DEFAULTS["num_classes"],
    n_owners: int = SYNTHETIC_DEFAULTS["n_owners"],
    cluster_spread: float = SYNTHETIC_DEFAULTS["cluster_spread"],
    seed: int = 0,
    class_separation: float = 2.5,
    owner_shift: float = 0.5,
) -> Dataset:
    """Gaussian clusters per (repository owner, class).

    Every owner gets a random offset and every class a shared centre; an
    example of owner ``o`` and class ``c`` is drawn around
    ``owner_offset[o] + class_center[c]`` with isotropic noise of scale
    ``cluster_spread``. Owner sizes are uneven (Dirichlet weights), which
    makes repository-based splits both size- and covariate-skewed.

    When ``cluster_spread <= 1`` the generator checks that a fixed linear
    rule built from the class centres labels the corpus with accuracy
    above 0.8 and raises ``RuntimeError`` otherwise.
    """
    if min(n_examples, feature_dim, num_classes, n_owners) < 1:
        raise ValueError("counts must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be nonnegative")
    rng = np.random.default_rng(seed)
    class_centers = rng.normal(0.0, class_separation / np.sqrt(feature_dim), size=(num_classes, feature_dim))
    class_centers *= class_separation / np.linalg.norm(class_centers, axis=1, keepdims=True)
    owner_offsets = rng.normal(0.0, owner_shift / np.sqrt(feature_dim), size=(n_owners, feature_dim))
    owner_weights = rng.dirichlet(np.full(n_owners, 2.0))
    owner_idx = rng.choice(n_owners, size=n_examples, p=owner_weights)
    labels = rng.integers(0, num_classes, size=n_examples)
    noise = rng.normal(0.0, 1.0, size=(n_examples, feature_dim))
    x = owner_offsets[owner_idx] + class_centers[labels] + cluster_spread * noise
    width = len(str(n_owners - 1))
    owners = tuple(f"owner{int(o):0{width}d}" for o in owner_idx)
    data = Dataset(x, labels, owners, num_classes)
    if cluster_spread <= 1:
        acc = _linear_rule_accuracy(x - owner_offsets[owner_idx].mean(axis=0), labels, class_centers)
        if acc <= 0.8:
            raise RuntimeError(f"synthetic corpus self-test failed: linear rule accuracy {acc:.3f} <= 0.8")
    return data


def train_eval_split(n: int, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted (train, eval) index arrays over ``range(n)``."""
    if not 0 < eval_fraction < 1:
        raise ValueError("eval fraction must be in (0, 1)")
    n_eval = int(round(eval_fraction * n))
    if n_eval < 1 or n_eval >= n:
        raise ValueError("eval split would leave an empty side")
    perm = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xE7A1]).permutation(n)
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])
