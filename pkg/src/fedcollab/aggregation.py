"""Server-side aggregation rules.

FedProx has no entry here: its server step is plain FedAvg and the
difference lives in the client objective (see ``core_model.local_train``).
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core_model import LayoutError, ParameterVector

AGGREGATORS = ("fedavg", "fedtrimmedavg", "fedmedian")
DEFAULT_TRIM_BETA = 0.2


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    params: ParameterVector
    num_examples: int
    train_loss: float = float("nan")

    def __post_init__(self) -> None:
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")


@dataclass(frozen=True)
class AggregationConfig:
    kind: str = "fedavg"
    trim_beta: float = DEFAULT_TRIM_BETA

    def __post_init__(self) -> None:
        if self.kind not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.kind!r}; expected one of {AGGREGATORS}")
        if not 0 <= self.trim_beta < 0.5:
            raise ValueError("trim_beta must be in [0, 0.5)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "trim_beta": self.trim_beta}


def _stack(updates: Sequence[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    first = updates[0].params
    for u in updates[1:]:
        if not u.params.compatible_with(first):
            raise LayoutError(f"update from client {u.client_id} is not layout-compatible")
    return np.stack([u.params.values for u in updates])


def _canonical(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    # fixed summation order makes the float result independent of arrival order
    return sorted(updates, key=lambda u: (u.client_id, u.num_examples, u.params.values.tobytes()))


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Example-count weighted coordinate-wise mean."""
    updates = _canonical(updates)
    stacked = _stack(updates)
    counts = np.array([u.num_examples for u in updates], dtype=np.float64)
    weights = counts / counts.sum()
    return updates[0].params.with_values(weights @ stacked)


def trim_count(m: int, beta: float) -> int:
    return math.floor(beta * m)


def aggregate_trimmed_mean(updates: Sequence[ClientUpdate], trim_beta: float = DEFAULT_TRIM_BETA) -> ParameterVector:
    """Per coordinate: drop the floor(beta*m) largest and smallest values, average the rest."""
    if not 0 <= trim_beta < 0.5:
        raise AggregationError("trim_beta must be in [0, 0.5)")
    stacked = _stack(updates)
    m = stacked.shape[0]
    k = trim_count(m, trim_beta)
    if 2 * k >= m:
        raise AggregationError(f"trimming {k} from each tail of {m} updates leaves nothing")
    ordered = np.sort(stacked, axis=0)
    return updates[0].params.with_values(ordered[k : m - k].mean(axis=0))


def aggregate_median(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Coordinate-wise median; even counts take the midpoint of the central pair."""
    stacked = _stack(updates)
    m = stacked.shape[0]
    ordered = np.sort(stacked, axis=0)
    if m % 2:
        mid = ordered[m // 2]
    else:
        lo, hi = ordered[m // 2 - 1], ordered[m // 2]
        mid = lo + (hi - lo) / 2
    return updates[0].params.with_values(mid)


def aggregate(updates: Sequence[ClientUpdate], cfg: AggregationConfig) -> ParameterVector:
    if cfg.kind == "fedavg":
        return aggregate_fedavg(updates)
    if cfg.kind == "fedtrimmedavg":
        return aggregate_trimmed_mean(updates, cfg.trim_beta)
    return aggregate_median(updates)
