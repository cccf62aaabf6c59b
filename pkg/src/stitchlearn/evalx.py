"""Evaluation and diagnostics: per-class AP / mAP and noise-level tracking.

AP is precision averaged at the positive hits of the descending-score
ranking, without interpolation; ties are broken by ascending sample index.
The noise tracker watches the stream of labels the trainer actually consumes
(stitched or not) and reports, per iteration window, the fraction of positive
label entries that disagree with clean ground truth, plus per-stitch counts
of entries corrected toward clean (reduced) and corrupted away from it
(introduced).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SubsetSplit:
    """Disjoint head / medium / tail class index sets."""

    head: tuple[int, ...]
    medium: tuple[int, ...]
    tail: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "head": list(self.head),
            "medium": list(self.medium),
            "tail": list(self.tail),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetSplit":
        return cls(
            head=tuple(d["head"]), medium=tuple(d["medium"]), tail=tuple(d["tail"])
        )


def split_by_counts(class_counts: Sequence[int]) -> SubsetSplit:
    """Head: more than 100 samples; medium: 20-100; tail: fewer than 20."""
    counts = np.asarray(class_counts)
    head = tuple(int(k) for k in np.flatnonzero(counts > 100))
    medium = tuple(int(k) for k in np.flatnonzero((counts >= 20) & (counts <= 100)))
    tail = tuple(int(k) for k in np.flatnonzero(counts < 20))
    return SubsetSplit(head=head, medium=medium, tail=tail)


@dataclass
class ApResult:
    per_class_ap: np.ndarray  # NaN for classes with no test positives
    map_total: float
    map_head: Optional[float]
    map_medium: Optional[float]
    map_tail: Optional[float]


def average_precision(scores, labels) -> float:
    """AP of one class over the test set.

    scores: real-valued predictions, one per test sample; labels: binary.
    Requires at least one positive. Ties in score rank by ascending sample
    index (stable sort on the negated scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits > 0].mean())


def _subset_mean(per_class: np.ndarray, classes: Sequence[int]) -> Optional[float]:
    vals = [per_class[k] for k in classes if not np.isnan(per_class[k])]
    if not vals:
        return None
    return float(np.mean(vals))


def map_from_scores(scores: np.ndarray, labels: np.ndarray, split: SubsetSplit) -> ApResult:
    """mAP report from a (n_samples, C) score matrix and binary label matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("score and label matrices must have equal shape")
    C = scores.shape[1]
    per_class = np.full(C, np.nan)
    for k in range(C):
        if labels[:, k].sum() == 0:
            log.warning("class %d has no test positives; excluded from mAP", k)
            continue
        per_class[k] = average_precision(scores[:, k], labels[:, k])
    total = _subset_mean(per_class, range(C))
    if total is None:
        raise ValueError("no class has test positives")
    return ApResult(
        per_class_ap=per_class,
        map_total=total,
        map_head=_subset_mean(per_class, split.head),
        map_medium=_subset_mean(per_class, split.medium),
        map_tail=_subset_mean(per_class, split.tail),
    )


def map_report(model, test_samples, split: SubsetSplit, tau: float) -> ApResult:
    """mAP over a test set via the model's ensembled probabilities."""
    if not test_samples:
        raise ValueError("map_report requires a non-empty test set")
    scores = model.predict_proba(test_samples, tau)
    labels = np.stack([s.clean_label for s in test_samples])
    return map_from_scores(scores, labels, split)


@dataclass
class NoiseLevelRecord:
    iteration: int
    noise_total: float
    noise_head: float
    noise_medium: float
    noise_tail: float
    reduced_count: int
    introduced_count: int


@dataclass
class NoiseLevelTracker:
    """Sliding-window noise accounting over the consumed training stream.

    For every consumed sample the positions considered are those positive in
    the clean reference or in the training label; the noise fraction is the
    summed absolute disagreement at those positions over their count. When a
    consumption came from a stitch of several members, each member entry that
    was wrong under its own label but right in the stitched result counts as
    reduced, and each that was right but ends wrong counts as introduced.
    """

    split: SubsetSplit
    n_classes: int
    window: int = 10
    records: list[NoiseLevelRecord] = field(default_factory=list)
    # window accumulators: [total, head, medium, tail] disagreement / position sums
    _num: np.ndarray = None
    _den: np.ndarray = None
    _reduced: int = 0
    _introduced: int = 0
    cum_num: float = 0.0
    cum_den: float = 0.0
    cum_reduced: int = 0
    cum_introduced: int = 0

    def __post_init__(self):
        if self._num is None:
            self._num = np.zeros(4)
        if self._den is None:
            self._den = np.zeros(4)
        self._masks = np.zeros((4, self.n_classes), dtype=bool)
        self._masks[0, :] = True
        for row, classes in enumerate(
            (self.split.head, self.split.medium, self.split.tail), start=1
        ):
            for k in classes:
                self._masks[row, k] = True

    def add_sample(
        self,
        train_label: np.ndarray,
        clean_label: np.ndarray,
        member_noisy: Sequence[np.ndarray] | None = None,
        member_clean: Sequence[np.ndarray] | None = None,
    ) -> None:
        train_label = np.asarray(train_label, dtype=np.float64)
        clean_label = np.asarray(clean_label, dtype=np.float64)
        positions = (train_label > 0) | (clean_label > 0)
        diff = np.abs(train_label - clean_label)
        for row in range(4):
            m = positions & self._masks[row]
            self._num[row] += diff[m].sum()
            self._den[row] += m.sum()
        self.cum_num += diff[positions].sum()
        self.cum_den += positions.sum()
        if member_noisy is not None:
            stitched_right = train_label == clean_label
            for noisy, clean in zip(member_noisy, member_clean):
                was_right = np.asarray(noisy) == np.asarray(clean)
                reduced = int((~was_right & stitched_right).sum())
                introduced = int((was_right & ~stitched_right).sum())
                self._reduced += reduced
                self._introduced += introduced
                self.cum_reduced += reduced
                self.cum_introduced += introduced

    def add_batch(
        self,
        train_labels: np.ndarray,
        clean_labels: np.ndarray,
        member_noisy: Optional[np.ndarray] = None,
        member_clean: Optional[np.ndarray] = None,
        starts: Optional[np.ndarray] = None,
        counts: Optional[np.ndarray] = None,
        stitched: Optional[np.ndarray] = None,
    ) -> None:
        """Vectorized add_sample over a consumed batch.

        member_noisy/member_clean are stacked member labels (M, C) with
        segment starts/counts mapping members to batch rows; stitched flags
        which rows came from a stitch (only those count reduced/introduced).
        """
        T = np.asarray(train_labels, dtype=np.float64)
        Cl = np.asarray(clean_labels, dtype=np.float64)
        pos = (T > 0) | (Cl > 0)
        diff = np.abs(T - Cl)
        err = diff * pos
        for row in range(4):
            m = self._masks[row]
            self._num[row] += err[:, m].sum()
            self._den[row] += pos[:, m].sum()
        self.cum_num += err.sum()
        self.cum_den += pos.sum()
        if member_noisy is not None and stitched is not None and stitched.any():
            rep = np.repeat(np.arange(len(counts)), counts)
            stitched_right_rows = (T == Cl).astype(bool)
            sr = stitched_right_rows[rep]
            keep = np.asarray(stitched, dtype=bool)[rep]
            was_right = np.asarray(member_noisy) == np.asarray(member_clean)
            reduced = int((~was_right & sr & keep[:, None]).sum())
            introduced = int((was_right & ~sr & keep[:, None]).sum())
            self._reduced += reduced
            self._introduced += introduced
            self.cum_reduced += reduced
            self.cum_introduced += introduced

    def end_iteration(self, iteration: int) -> Optional[NoiseLevelRecord]:
        """Emit a record when the window closes; call once per iteration."""
        if (iteration + 1) % self.window != 0:
            return None
        return self.flush(iteration)

    def flush(self, iteration: int) -> Optional[NoiseLevelRecord]:
        if self._den[0] == 0:
            return None
        fracs = [
            float(self._num[i] / self._den[i]) if self._den[i] > 0 else 0.0
            for i in range(4)
        ]
        rec = NoiseLevelRecord(
            iteration=iteration,
            noise_total=fracs[0],
            noise_head=fracs[1],
            noise_medium=fracs[2],
            noise_tail=fracs[3],
            reduced_count=self._reduced,
            introduced_count=self._introduced,
        )
        self.records.append(rec)
        self._num[:] = 0.0
        self._den[:] = 0.0
        self._reduced = 0
        self._introduced = 0
        return rec

    @property
    def cumulative_noise(self) -> float:
        return float(self.cum_num / self.cum_den) if self.cum_den > 0 else 0.0

    def state_dict(self) -> dict:
        return {
            "num": self._num.tolist(),
            "den": self._den.tolist(),
            "reduced": self._reduced,
            "introduced": self._introduced,
            "cum_num": self.cum_num,
            "cum_den": self.cum_den,
            "cum_reduced": self.cum_reduced,
            "cum_introduced": self.cum_introduced,
        }

    def load_state_dict(self, d: dict) -> None:
        self._num = np.asarray(d["num"], dtype=np.float64)
        self._den = np.asarray(d["den"], dtype=np.float64)
        self._reduced = int(d["reduced"])
        self._introduced = int(d["introduced"])
        self.cum_num = float(d["cum_num"])
        self.cum_den = float(d["cum_den"])
        self.cum_reduced = int(d["cum_reduced"])
        self.cum_introduced = int(d["cum_introduced"])


NOISE_CSV_FIELDS = (
    "iteration",
    "noise_total",
    "noise_head",
    "noise_medium",
    "noise_tail",
    "reduced_count",
    "introduced_count",
)


def write_noise_csv(path, records: Sequence[NoiseLevelRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NOISE_CSV_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.iteration,
                    repr(r.noise_total),
                    repr(r.noise_head),
                    repr(r.noise_medium),
                    repr(r.noise_tail),
                    r.reduced_count,
                    r.introduced_count,
                ]
            )


def read_noise_csv(path) -> list[NoiseLevelRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                NoiseLevelRecord(
                    iteration=int(row["iteration"]),
                    noise_total=float(row["noise_total"]),
                    noise_head=float(row["noise_head"]),
                    noise_medium=float(row["noise_medium"]),
                    noise_tail=float(row["noise_tail"]),
                    reduced_count=int(row["reduced_count"]),
                    introduced_count=int(row["introduced_count"]),
                )
            )
    return out
