"""Classification and calibration metrics, attention entropy, checkpoint selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError


@dataclass
class MetricsRow:
    """One evaluation record for one split at one epoch."""

    epoch: int
    split: str
    loss: float
    acc: float
    auc: float
    nll: float
    ece: float
    entropy_top100: Optional[float] = None


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size < 1:
        raise ContractError(f"accuracy: need equal non-empty inputs, got {preds.shape} vs {labels.shape}")
    return float(np.mean(preds == labels))


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: both classes must be present")
    # Mann-Whitney via average ranks; ties get half credit.
    _, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg_ranks = starts + (counts + 1) / 2.0  # 1-based
    ranks = avg_ranks[inv]
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Area under the ROC curve.

    1-D scores with binary labels give the pairwise win fraction with half
    credit for ties. A 2-D (N, C) score matrix gives the macro one-vs-rest
    mean over classes that have both members and non-members.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return _binary_auc(scores, labels.astype(int) == 1)
    per_class = []
    for c in range(scores.shape[1]):
        mask = labels.astype(int) == c
        if 0 < mask.sum() < mask.size:
            per_class.append(_binary_auc(scores[:, c], mask))
    if not per_class:
        raise UndefinedMetricError("auc: no class has both members and non-members")
    return float(np.mean(per_class))


def nll(probabilities, labels, clamp: float = 1e-12) -> float:
    """Mean negative log probability of the true class."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("nll: each distribution must sum to 1 within 1e-6")
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, clamp))))


def ece(probabilities, labels, bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins on (0, 1].

    Confidence is the max class probability; each bin contributes its
    weight times |accuracy - mean confidence|.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("ece: each distribution must sum to 1 within 1e-6")
    conf = probs.max(axis=-1)
    correct = probs.argmax(axis=-1) == labels
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = len(labels)
    out = 0.0
    for b in range(bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        out += (n_b / total) * abs(correct[mask].mean() - conf[mask].mean())
    return float(out)


def attention_entropy_top_k(scores, k: int = 100, renormalize: bool = True) -> float:
    """Shannon entropy (bits) of the k largest attention scores.

    The top-k mass is renormalized to sum to 1 before the entropy sum
    (set ``renormalize=False`` to keep the scores on their original
    scale); zero entries contribute nothing. k is capped at the score
    count, so the result lies in [0, log2 k].
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ContractError("attention_entropy_top_k: scores must be a non-empty vector")
    if np.any(scores < 0) or abs(scores.sum() - 1.0) > 1e-6:
        raise ContractError("attention_entropy_top_k: scores must be a distribution")
    kk = min(k, scores.size)
    top = np.sort(scores)[::-1][:kk]
    if renormalize:
        top = top / top.sum()
    top = top[top > 0]
    return float(-(top * np.log2(top)).sum())


def select_top_checkpoints(epoch_records: Sequence[tuple[int, float]], n: int = 10) -> list[int]:
    """Epochs of the n highest validation AUCs; ties go to the earlier epoch."""
    if not epoch_records:
        raise ContractError("select_top_checkpoints: need at least one record")
    ordered = sorted(epoch_records, key=lambda rec: (-rec[1], rec[0]))
    return [epoch for epoch, _ in ordered[:min(n, len(ordered))]]
