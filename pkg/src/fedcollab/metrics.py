"""Evaluation measures: binary F1, accuracy, MRR, BLEU-4 and token accuracy.

BLEU smoothing: the unigram precision is used as-is; for n = 2..4 one is
added to both the clipped match count and the candidate n-gram count
(add-one smoothing, "method 2" of Chen & Cherry, 2014). An exact copy of
a reference of length >= 4 therefore still scores 1.0, and a candidate
with no unigram overlap scores 0.0.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Hashable, Sequence

import numpy as np

TASK_KINDS = ("classification", "retrieval", "generation", "token_completion")


class MetricError(ValueError):
    pass


def _check_pair(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise MetricError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")


def f1_binary(preds: Sequence[int], golds: Sequence[int]) -> float:
    """F1 of the positive class (label 1); 0.0 when precision + recall is 0."""
    _check_pair(preds, golds)
    if any(v not in (0, 1) for v in list(preds) + list(golds)):
        raise MetricError("binary F1 expects labels in {0, 1}")
    tp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 1)
    fp = sum(1 for p, g in zip(preds, golds) if p == 1 and g == 0)
    fn = sum(1 for p, g in zip(preds, golds) if p == 0 and g == 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def accuracy(preds: Sequence[Hashable], golds: Sequence[Hashable]) -> float:
    _check_pair(preds, golds)
    if not golds:
        raise MetricError("accuracy of an empty batch is undefined")
    return sum(1 for p, g in zip(preds, golds) if p == g) / len(golds)


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank of the gold item (ranks are 1-based)."""
    if not ranks:
        raise MetricError("MRR of an empty batch is undefined")
    if any(int(r) != r or r < 1 for r in ranks):
        raise MetricError("ranks must be positive integers")
    return sum(1.0 / r for r in ranks) / len(ranks)


def gold_rank(scores: Sequence[float], gold_index: int) -> int:
    """1-based rank of the gold candidate; ties go to the lower candidate index."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= gold_index < s.size:
        raise MetricError("gold index outside candidate list")
    order = np.lexsort((np.arange(s.size), -s))
    return int(np.flatnonzero(order == gold_index)[0]) + 1


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_counts(pred: Sequence[Hashable], gold: Sequence[Hashable], max_n: int = 4) -> tuple[list[int], list[int]]:
    matches, totals = [], []
    for n in range(1, max_n + 1):
        p, g = _ngrams(pred, n), _ngrams(gold, n)
        matches.append(sum(min(c, g[ng]) for ng, c in p.items()))
        totals.append(max(len(pred) - n + 1, 0))
    return matches, totals


def _bleu_from_counts(matches: Sequence[int], totals: Sequence[int], pred_len: int, gold_len: int) -> float:
    if pred_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        precision = m / t if n == 1 else (m + 1) / (t + 1)
        log_p += 0.25 * math.log(precision)
    bp = 1.0 if pred_len >= gold_len else math.exp(1 - gold_len / pred_len)
    return min(1.0, bp * math.exp(log_p))


def bleu4(pred_tokens: Sequence[Hashable], gold_tokens: Sequence[Hashable]) -> float:
    """Sentence BLEU-4 with brevity penalty and add-one smoothing for n >= 2."""
    if not gold_tokens:
        raise MetricError("gold token sequence must be nonempty")
    matches, totals = _bleu_counts(pred_tokens, gold_tokens)
    return _bleu_from_counts(matches, totals, len(pred_tokens), len(gold_tokens))


def corpus_bleu4(preds: Sequence[Sequence[Hashable]], golds: Sequence[Sequence[Hashable]]) -> float:
    """Corpus BLEU-4: n-gram and length counts are summed before forming ratios."""
    _check_pair(preds, golds)
    if not golds:
        raise MetricError("corpus BLEU of an empty batch is undefined")
    matches, totals = [0] * 4, [0] * 4
    pred_len = gold_len = 0
    for p, g in zip(preds, golds):
        if not g:
            raise MetricError("gold token sequence must be nonempty")
        m, t = _bleu_counts(p, g)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        pred_len += len(p)
        gold_len += len(g)
    return _bleu_from_counts(matches, totals, pred_len, gold_len)


def token_accuracy(preds: Sequence[Sequence[Hashable]], golds: Sequence[Sequence[Hashable]]) -> float:
    """Per-token exact-match accuracy over aligned sequences.

    Positions past the end of a shorter prediction count as misses.
    """
    _check_pair(preds, golds)
    hits = total = 0
    for p, g in zip(preds, golds):
        total += len(g)
        hits += sum(1 for a, b in zip(p, g) if a == b)
    if total == 0:
        raise MetricError("token accuracy needs at least one gold token")
    return hits / total


def evaluate_batch(batch: dict) -> dict[str, float]:
    """Score an evaluation batch document.

    Expected shapes by ``task_kind``:

    - classification: ``{"preds": [...], "golds": [...]}`` -> accuracy (+ f1 if binary)
    - retrieval: ``{"records": [{"scores": [...], "gold": i}, ...]}`` or ``{"ranks": [...]}`` -> mrr
    - generation: ``{"preds": [[tok, ...]], "golds": [[tok, ...]]}`` -> bleu4 (corpus)
    - token_completion: same shape as generation -> token_accuracy
    """
    kind = batch.get("task_kind")
    if kind not in TASK_KINDS:
        raise MetricError(f"unknown task_kind {kind!r}")
    payload = batch.get("payload", batch)
    if kind == "classification":
        preds, golds = payload["preds"], payload["golds"]
        out = {"accuracy": accuracy(preds, golds)}
        if set(preds) | set(golds) <= {0, 1}:
            out["f1"] = f1_binary(preds, golds)
        return out
    if kind == "retrieval":
        if "ranks" in payload:
            ranks = payload["ranks"]
        else:
            ranks = [gold_rank(r["scores"], r["gold"]) for r in payload["records"]]
        return {"mrr": mrr(ranks)}
    if kind == "generation":
        return {"bleu4": corpus_bleu4(payload["preds"], payload["golds"])}
    return {"token_accuracy": token_accuracy(payload["preds"], payload["golds"])}
