"""Equal error rate and DET operating points.

Convention: a higher score means "more likely fake" and a trial is called
fake when ``score >= threshold``. Hence

* FAR = P(called fake | real)   (non-increasing in the threshold)
* FRR = P(called real | fake)   (non-decreasing in the threshold)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricUndefinedError(ValueError):
    """Raised when a metric needs both classes but only one is present."""


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 0 = real, 1 = fake

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 (real) or 1 (fake)")

    def require_both_classes(self) -> None:
        n_fake = int(self.labels.sum())
        if n_fake == 0 or n_fake == self.labels.size:
            raise MetricUndefinedError(
                f"EER undefined: need both classes, got {self.labels.size - n_fake} real and {n_fake} fake"
            )


def det_points(s: ScoredSet) -> list[tuple[float, float, float]]:
    """Distinct (threshold, FAR, FRR) operating points in increasing threshold.

    Thresholds sweep every distinct score plus the -inf/+inf sentinels;
    consecutive thresholds yielding the same operating point are collapsed
    to the first.
    """
    s.require_both_classes()
    order = np.argsort(s.scores, kind="mergesort")
    scores, labels = s.scores[order], s.labels[order]
    n_fake = labels.sum()
    n_real = labels.size - n_fake
    distinct, first = np.unique(scores, return_index=True)
    # trials strictly below each distinct score are called real
    fake_below = np.concatenate(([0], np.cumsum(labels)))[first]
    real_below = first - fake_below
    thresholds = np.concatenate(([-np.inf], distinct, [np.inf]))
    far = np.concatenate(([1.0], (n_real - real_below) / n_real, [0.0]))
    frr = np.concatenate(([0.0], fake_below / n_fake, [1.0]))

    points = []
    for t, a, r in zip(thresholds, far, frr):
        if points and points[-1][1] == a and points[-1][2] == r:
            continue
        points.append((float(t), float(a), float(r)))
    return points


def compute_eer(s: ScoredSet) -> float:
    """EER by linear interpolation across the FAR - FRR sign change."""
    pts = det_points(s)
    far = np.array([p[1] for p in pts])
    frr = np.array([p[2] for p in pts])
    diff = far - frr
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        return float(far[k])
    # diff[0] = 1 > 0, so k >= 1 and the crossing lies on segment (k-1, k)
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(far[k - 1] + t * (far[k] - far[k - 1]))


def eer(scores, labels) -> float:
    return compute_eer(ScoredSet(scores, labels))


def write_det_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in points:
            w.writerow([repr(t), repr(a), repr(r)])


def write_score_file(ids, scores, labels, path) -> None:
    """One ``utterance_id score label`` line per trial, label in {real, fake}."""
    names = ("real", "fake")
    with open(path, "w") as fh:
        for uid, sc, lab in zip(ids, scores, labels):
            fh.write(f"{uid} {float(sc)!r} {names[int(lab)]}\n")


def read_score_file(path) -> tuple[list[str], ScoredSet]:
    ids, scores, labels = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3 or fields[2] not in ("real", "fake"):
            raise ValueError(f"{path}:{lineno}: expected 'utterance_id score real|fake'")
        ids.append(fields[0])
        scores.append(float(fields[1]))
        labels.append(1 if fields[2] == "fake" else 0)
    return ids, ScoredSet(np.array(scores), np.array(labels))
