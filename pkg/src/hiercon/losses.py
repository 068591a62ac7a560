"""Classification and margin-contrastive objectives.

Labels are integers: 0 = real (bona fide), 1 = fake (spoof).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    lambda_con: float = 0.1
    include_anchor: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.lambda_con < 0:
            raise ValueError(f"lambda_con must be >= 0, got {self.lambda_con}")


@dataclass
class Batch:
    embeddings: Tensor  # [N x proj_dim]
    labels: np.ndarray  # [N]
    logits: Tensor  # [N x 2]

    def __post_init__(self):
        self.labels = _check_labels(self.labels)
        n = self.labels.shape[0]
        if self.embeddings.shape[0] != n or self.logits.shape[0] != n:
            raise tc.ShapeError(
                f"batch rows disagree: {n} labels, embeddings {self.embeddings.shape}, logits {self.logits.shape}"
            )


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError(f"labels must be a non-empty 1-D sequence, got shape {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        bad = sorted(set(labels.tolist()) - {0, 1})
        raise ValueError(f"labels must be 0 (real) or 1 (fake); found {bad}")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return tc.cross_entropy(logits, _check_labels(labels))


def _pair_masks(labels: np.ndarray, include_anchor: bool) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    pos = same if include_anchor else same & ~np.eye(labels.size, dtype=bool)
    return pos, ~same


def mean_similarities(batch: Batch, i: int, include_anchor: bool = False) -> tuple[float | None, float | None]:
    """Mean cosine of anchor ``i`` to its positives and to its negatives.

    Either value is None when the corresponding set is empty.
    """
    n = batch.labels.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"anchor {i} outside batch of {n}")
    f = batch.embeddings.data
    pos, neg = _pair_masks(batch.labels, include_anchor)
    sims = np.array([tc.cosine_similarity(f[i], f[j]) for j in range(n)])
    s_pos = float(sims[pos[i]].mean()) if pos[i].any() else None
    s_neg = float(sims[neg[i]].mean()) if neg[i].any() else None
    return s_pos, s_neg


def hinge_arguments(f, labels, margin: float, include_anchor: bool = False) -> np.ndarray:
    """``m + s_neg - s_pos`` per anchor (NaN where the anchor is skipped)."""
    f = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    labels = _check_labels(labels)
    pos, neg = _pair_masks(labels, include_anchor)
    sim = tc.CosineMatrix().forward(f)
    n_pos, n_neg = pos.sum(1), neg.sum(1)
    valid = (n_pos > 0) & (n_neg > 0)
    s_pos = (sim * pos).sum(1) / np.maximum(n_pos, 1)
    s_neg = (sim * neg).sum(1) / np.maximum(n_neg, 1)
    return np.where(valid, margin + s_neg - s_pos, np.nan)


def contrastive_margin(f: Tensor, labels, margin: float = 0.5, include_anchor: bool = False) -> Tensor:
    """Batch hinge ``mean_i max(0, m + s_neg_i - s_pos_i)``.

    Anchors without a positive or without a negative contribute 0 but still
    count in the 1/N normaliser.
    """
    labels = _check_labels(labels)
    if f.shape[0] != labels.shape[0]:
        raise tc.ShapeError(f"{f.shape[0]} embeddings for {labels.shape[0]} labels")
    n = labels.shape[0]
    pos, neg = _pair_masks(labels, include_anchor)
    n_pos, n_neg = pos.sum(1), neg.sum(1)
    valid = ((n_pos > 0) & (n_neg > 0)).astype(np.float64)

    sim = tc.cosine_matrix(f)
    s_pos = tc.sum_axis(tc.mul(sim, Tensor(pos / np.maximum(n_pos, 1)[:, None])), axis=1)
    s_neg = tc.sum_axis(tc.mul(sim, Tensor(neg / np.maximum(n_neg, 1)[:, None])), axis=1)
    arg = tc.add(tc.sub(s_neg, s_pos), Tensor(np.full(n, float(margin))))
    per_anchor = tc.mul(tc.relu(arg), Tensor(valid))
    return tc.mean_axis(per_anchor, axis=0)


def brute_force_contrastive(f, labels, margin: float = 0.5, eps: float = tc.COSINE_EPS) -> float:
    """Reference double loop over plain Python floats; for tests only."""
    rows = [[float(x) for x in row] for row in np.asarray(f.data if isinstance(f, Tensor) else f)]
    labels = [int(x) for x in labels]
    n = len(rows)

    def cos(a, b):
        dot = 0.0
        na = 0.0
        nb = 0.0
        for x, y in zip(a, b):
            dot += x * y
            na += x * x
            nb += y * y
        return dot / (math.sqrt(na) * math.sqrt(nb) + eps)

    total = 0.0
    for i in range(n):
        pos_sum, pos_n, neg_sum, neg_n = 0.0, 0, 0.0, 0
        for j in range(n):
            if j == i:
                continue
            c = cos(rows[i], rows[j])
            if labels[j] == labels[i]:
                pos_sum += c
                pos_n += 1
            else:
                neg_sum += c
                neg_n += 1
        if pos_n == 0 or neg_n == 0:
            continue
        total += max(0.0, margin + neg_sum / neg_n - pos_sum / pos_n)
    return total / n


def total_loss(batch: Batch, cfg: LossConfig) -> tuple[Tensor, float, float]:
    """Joint objective ``ce + lambda_con * con``; returns (total, ce, con)."""
    ce = cross_entropy(batch.logits, batch.labels)
    con = contrastive_margin(batch.embeddings, batch.labels, cfg.margin, cfg.include_anchor)
    total = tc.add(ce, tc.scale(con, cfg.lambda_con))
    return total, ce.item(), con.item()
