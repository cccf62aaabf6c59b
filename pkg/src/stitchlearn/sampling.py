"""Batch samplers: uniform over instances and class-rebalanced.

Both draw with replacement, slot by slot. The class-rebalanced sampler picks
a class uniformly for each slot and then an instance uniformly from that
class's noisy-positive list, so every class carries marginal probability 1/C
regardless of its frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .synthgen import TokenBagSample, label_matrix

SAMPLER_KINDS = ("uniform", "class_rebalanced")


@dataclass
class BatchIndices:
    sample_ids: np.ndarray
    provenance_class: Optional[np.ndarray] = None


def positives_by_class(samples: Sequence[TokenBagSample], n_classes: int) -> list[np.ndarray]:
    """Index lists of noisy-positive samples per class (training-label view)."""
    Y = label_matrix(samples, clean=False)
    if Y.shape[1] != n_classes:
        raise ValueError("label width does not match n_classes")
    return [np.flatnonzero(Y[:, k]) for k in range(n_classes)]


class Sampler:
    """Seeded batch sampler owning its own random stream."""

    def __init__(
        self,
        kind: str,
        samples: Sequence[TokenBagSample],
        n_classes: int,
        seed_or_rng,
    ):
        if kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {kind!r}")
        if not samples:
            raise ValueError("sampler needs a non-empty dataset")
        self.kind = kind
        self.n = len(samples)
        self.n_classes = n_classes
        if isinstance(seed_or_rng, np.random.Generator):
            self.rng = seed_or_rng
        else:
            self.rng = np.random.default_rng(seed_or_rng)
        self.class_lists: Optional[list[np.ndarray]] = None
        if kind == "class_rebalanced":
            self.class_lists = positives_by_class(samples, n_classes)
            for k, lst in enumerate(self.class_lists):
                if len(lst) == 0:
                    raise ValueError(
                        f"class {k} has no positive samples; "
                        "class-rebalanced sampling is undefined"
                    )

    def sample_batch(self, batch_size: int) -> BatchIndices:
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.kind == "uniform":
            ids = self.rng.integers(0, self.n, size=batch_size)
            return BatchIndices(sample_ids=ids)
        classes = self.rng.integers(0, self.n_classes, size=batch_size)
        sizes = np.asarray([len(self.class_lists[c]) for c in classes])
        offsets = self.rng.integers(0, sizes)
        ids = np.asarray(
            [self.class_lists[c][o] for c, o in zip(classes, offsets)]
        )
        return BatchIndices(sample_ids=ids, provenance_class=classes)


def sample_batch(sampler: Sampler, batch_size: int) -> BatchIndices:
    return sampler.sample_batch(batch_size)
