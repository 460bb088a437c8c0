"""Parameter vectors, toy classifiers and local (optionally proximal) SGD.

Two model kinds are supported: multinomial logistic regression and a
one-hidden-layer tanh MLP. Both expose their weights as a flat
:class:`ParameterVector` so they can be shipped between clients and the
server and aggregated coordinate-wise.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_PROX_MU = 0.01

Segment = tuple[str, tuple[int, ...]]


class LayoutError(ValueError):
    """Raised when two parameter vectors (or a vector and a spec) disagree on layout."""


@dataclass(frozen=True)
class ParameterVector:
    """Flat model weights annotated with named, shaped segments."""

    segments: tuple[Segment, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        segs = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.segments)
        for name, shape in segs:
            if not shape or any(s <= 0 for s in shape):
                raise LayoutError(f"segment {name!r} has invalid shape {shape}")
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        expected = sum(math.prod(shape) for _, shape in segs)
        if vals.size != expected:
            raise LayoutError(f"expected {expected} values for layout, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameter values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.segments == other.segments and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.segments, self.values.tobytes()))

    def compatible_with(self, other: ParameterVector) -> bool:
        return self.segments == other.segments

    def with_values(self, values: np.ndarray) -> ParameterVector:
        return ParameterVector(self.segments, values)

    def segment(self, name: str) -> np.ndarray:
        """Return a reshaped read-only view of one named segment."""
        offset = 0
        for seg_name, shape in self.segments:
            size = math.prod(shape)
            if seg_name == name:
                return self.values[offset : offset + size].reshape(shape)
            offset += size
        raise KeyError(name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: self.segment(name) for name, _ in self.segments}

    @classmethod
    def from_arrays(cls, arrays: Sequence[tuple[str, np.ndarray]]) -> ParameterVector:
        segments = tuple((name, tuple(np.shape(arr))) for name, arr in arrays)
        flat = np.concatenate([np.asarray(arr, dtype=np.float64).reshape(-1) for _, arr in arrays])
        return cls(segments, flat)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic_regression"
    feature_dim: int = 2
    num_classes: int = 2
    hidden_dim: int = 16

    def __post_init__(self) -> None:
        if self.kind not in ("logistic_regression", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")

    def layout(self) -> tuple[Segment, ...]:
        d, c = self.feature_dim, self.num_classes
        if self.kind == "logistic_regression":
            return (("w", (c, d)), ("b", (c,)))
        h = self.hidden_dim
        return (("w1", (h, d)), ("b1", (h,)), ("w2", (c, h)), ("b2", (c,)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "feature_dim": self.feature_dim, "num_classes": self.num_classes}
        if self.kind == "mlp":
            out["hidden_dim"] = self.hidden_dim
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> ModelSpec:
        return cls(
            kind=raw.get("kind", "logistic_regression"),
            feature_dim=int(raw["feature_dim"]),
            num_classes=int(raw["num_classes"]),
            hidden_dim=int(raw.get("hidden_dim", 16)),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Local optimisation settings.

    ``prox_mu`` is the FedProx penalty weight; 0 gives plain mini-batch SGD.
    """

    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.2
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.prox_mu >= 0:
            raise ValueError("prox_mu must be >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "prox_mu": self.prox_mu,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        return cls(**{k: raw[k] for k in ("epochs", "batch_size", "learning_rate", "prox_mu", "seed") if k in raw})


def check_layout(spec: ModelSpec, params: ParameterVector) -> None:
    if params.segments != spec.layout():
        raise LayoutError(f"parameters {params.segments} do not match spec layout {spec.layout()}")


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in spec.layout():
        if len(shape) == 1:
            arrays.append((name, np.zeros(shape)))
        else:
            bound = 1.0 / math.sqrt(shape[1])
            arrays.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParameterVector.from_arrays(arrays)


def zeros_like_spec(spec: ModelSpec) -> ParameterVector:
    layout = spec.layout()
    return ParameterVector(layout, np.zeros(sum(math.prod(s) for _, s in layout)))


def _logits(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    if spec.kind == "logistic_regression":
        return x @ params.segment("w").T + params.segment("b")
    hidden = np.tanh(x @ params.segment("w1").T + params.segment("b1"))
    return hidden @ params.segment("w2").T + params.segment("b2")


def forward(spec: ModelSpec, params: ParameterVector, features: Sequence[float] | np.ndarray) -> np.ndarray:
    """Class scores for one feature vector (or a batch, one row per example)."""
    check_layout(spec, params)
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != spec.feature_dim or x.ndim > 2:
        raise ValueError(f"expected feature dimension {spec.feature_dim}, got shape {x.shape}")
    return _logits(spec, params, x)


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict(spec: ModelSpec, params: ParameterVector, features: np.ndarray) -> np.ndarray:
    return np.argmax(forward(spec, params, features), axis=-1)


def cross_entropy(spec: ModelSpec, params: ParameterVector, x: np.ndarray, y: np.ndarray) -> float:
    scores = forward(spec, params, x)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def objective(
    spec: ModelSpec,
    params: ParameterVector,
    x: np.ndarray,
    y: np.ndarray,
    prox_mu: float = 0.0,
    anchor: ParameterVector | None = None,
) -> float:
    """Mean cross-entropy plus the optional proximal penalty (mu/2)*||w - anchor||^2."""
    loss = cross_entropy(spec, params, x, y)
    if prox_mu > 0:
        if anchor is None:
            raise ValueError("proximal term needs an anchor")
        diff = params.values - anchor.values
        loss += 0.5 * prox_mu * float(diff @ diff)
    return loss


def _loss_and_grad(spec: ModelSpec, flat: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    # flat is the raw value buffer; unpacked by offsets to avoid re-validating per batch
    n = x.shape[0]
    c = spec.num_classes
    if spec.kind == "logistic_regression":
        d = spec.feature_dim
        w = flat[: c * d].reshape(c, d)
        b = flat[c * d :]
        scores = x @ w.T + b
    else:
        d, h = spec.feature_dim, spec.hidden_dim
        o1 = h * d
        o2 = o1 + h
        o3 = o2 + c * h
        w1 = flat[:o1].reshape(h, d)
        b1 = flat[o1:o2]
        w2 = flat[o2:o3].reshape(c, h)
        b2 = flat[o3:]
        hidden = np.tanh(x @ w1.T + b1)
        scores = hidden @ w2.T + b2

    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sums[:, 0]) - shifted[rows, y]))
    delta = exp / sums
    delta[rows, y] -= 1.0
    delta /= n

    if spec.kind == "logistic_regression":
        grad = np.concatenate([(delta.T @ x).reshape(-1), delta.sum(axis=0)])
    else:
        g_w2 = delta.T @ hidden
        g_b2 = delta.sum(axis=0)
        d_hidden = (delta @ w2) * (1.0 - hidden * hidden)
        g_w1 = d_hidden.T @ x
        g_b1 = d_hidden.sum(axis=0)
        grad = np.concatenate([g_w1.reshape(-1), g_b1, g_w2.reshape(-1), g_b2])
    return loss, grad


def gradient(
    spec: ModelSpec,
    params: ParameterVector,
    x: np.ndarray,
    y: np.ndarray,
    prox_mu: float = 0.0,
    anchor: ParameterVector | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`objective` with respect to the flat values."""
    check_layout(spec, params)
    _, grad = _loss_and_grad(spec, params.values, np.asarray(x, dtype=np.float64), np.asarray(y))
    if prox_mu > 0:
        if anchor is None:
            raise ValueError("proximal term needs an anchor")
        grad = grad + prox_mu * (params.values - anchor.values)
    return grad


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "features") and hasattr(data, "labels") and isinstance(data.labels, np.ndarray):
        return np.asarray(data.features, dtype=np.float64), np.asarray(data.labels, dtype=np.int64)
    examples = list(data)
    if not examples:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    x = np.array([ex.features for ex in examples], dtype=np.float64)
    y = np.array([ex.label for ex in examples], dtype=np.int64)
    return x, y


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled example order for one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch]).permutation(n)


def local_train(
    spec: ModelSpec,
    start: ParameterVector,
    data,
    cfg: TrainConfig,
    global_anchor: ParameterVector | None = None,
    on_epoch_end: Callable[[int, ParameterVector, float], None] | None = None,
) -> tuple[ParameterVector, float]:
    """Mini-batch gradient descent on softmax cross-entropy.

    When ``cfg.prox_mu > 0`` the objective gains (mu/2)*||w - global_anchor||^2
    (FedProx). That term is applied as an exact proximal step after each
    cross-entropy gradient step, so a very large mu pins the weights to
    the anchor instead of overshooting it. ``data`` is either a
    :class:`~fedcollab.partition.Dataset` or an iterable of labelled
    examples. Returns the final parameters and the mean per-example
    cross-entropy seen during the last epoch.

    ``on_epoch_end(epoch_index, params, epoch_loss)`` is invoked after
    each epoch; the centralized baseline uses it to report per epoch.
    """
    check_layout(spec, start)
    anchor = start if global_anchor is None else global_anchor
    check_layout(spec, anchor)
    x, y = _as_arrays(data)
    n = len(y)
    if n == 0:
        raise ValueError("local_train needs at least one example")
    if x.shape[1] != spec.feature_dim:
        raise ValueError(f"expected feature dimension {spec.feature_dim}, got {x.shape[1]}")

    w = np.array(start.values, dtype=np.float64)
    anchor_values = anchor.values
    lr, mu, bs = cfg.learning_rate, cfg.prox_mu, cfg.batch_size
    last_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            loss, grad = _loss_and_grad(spec, w, x[idx], y[idx])
            if mu > 0:
                # implicit step on the quadratic: stable for any lr * mu
                w = (w - lr * grad + (lr * mu) * anchor_values) / (1.0 + lr * mu)
            else:
                w -= lr * grad
            total += loss * len(idx)
        last_loss = total / n
        if not np.all(np.isfinite(w)):
            raise FloatingPointError("training diverged (non-finite weights)")
        if on_epoch_end is not None:
            on_epoch_end(epoch, ParameterVector(start.segments, w.copy()), last_loss)
    return ParameterVector(start.segments, w), last_loss


# -- checkpoints -------------------------------------------------------------


def checkpoint_dict(spec: ModelSpec, params: ParameterVector) -> dict:
    check_layout(spec, params)
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "segments": [[name, list(shape)] for name, shape in params.segments],
        # float repr in json is shortest round-trip
        "values": [float(v) for v in params.values],
    }


def checkpoint_from_dict(raw: dict) -> tuple[ModelSpec, ParameterVector]:
    if raw.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {raw.get('format_version')!r}")
    spec = ModelSpec.from_dict(raw["spec"])
    params = ParameterVector(tuple((name, tuple(shape)) for name, shape in raw["segments"]), raw["values"])
    check_layout(spec, params)
    return spec, params


def save_checkpoint(path: str | Path, spec: ModelSpec, params: ParameterVector) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(spec, params), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ParameterVector]:
    return checkpoint_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def stack_values(vectors: Iterable[ParameterVector]) -> np.ndarray:
    vectors = list(vectors)
    first = vectors[0]
    for v in vectors[1:]:
        if not v.compatible_with(first):
            raise LayoutError("parameter vectors are not layout-compatible")
    return np.stack([v.values for v in vectors])
