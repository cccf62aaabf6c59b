"""Stitch augmentation: candidate selection, three synthesis modes, label union.

A stitched training example merges K samples that share one (noisy-)positive
class. The shared class is drawn uniformly from the anchor's positives and
the K-1 partners uniformly with replacement from that class's positive list.
Synthesis happens either on the input token bags (multiset union), on the
intermediate head features (concatenation in member order), or as the
feature average (the default); labels are always the elementwise OR of the
member labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numcore
from .numcore import Layer, MlpParams
from .synthgen import TokenBagSample

STITCH_MODES = ("input_concat", "feature_concat", "feature_average", "off")


@dataclass
class StitchMode:
    mode: str = "feature_average"
    k: int = 2
    p: float = 1.0

    def __post_init__(self):
        if self.mode not in STITCH_MODES:
            raise ValueError(f"unknown stitch mode {self.mode!r}")
        if self.k < 2:
            raise ValueError("stitch k must be at least 2")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("stitch p must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return self.mode != "off"


@dataclass
class CandidateSet:
    anchor_id: int
    shared_class: int
    member_ids: list[int]  # length K, anchor included


@dataclass
class StitchedSample:
    """Either a K-member stitch or a passthrough of the anchor (members == [anchor])."""

    members: list[TokenBagSample]
    label: np.ndarray  # OR of member noisy labels (pre pseudo-labeling)
    shared_class: Optional[int]
    stitched: bool

    @property
    def member_ids(self) -> list[int]:
        return [m.sample_id for m in self.members]


def label_union(labels: Sequence[np.ndarray]) -> np.ndarray:
    labels = [np.asarray(l) for l in labels]
    if not labels:
        raise ValueError("label_union needs at least one label")
    width = labels[0].shape
    if any(l.shape != width for l in labels):
        raise ValueError("labels must have equal length")
    out = labels[0].copy()
    for l in labels[1:]:
        out = np.maximum(out, l)
    return out


def select_candidates(
    anchor: TokenBagSample,
    class_index: Sequence[np.ndarray],
    k: int,
    rng: np.random.Generator,
) -> CandidateSet:
    """Pick the shared class uniformly from the anchor's noisy positives and
    k-1 partners uniformly with replacement from that class's positive list
    (the anchor itself qualifies and may repeat)."""
    positives = np.flatnonzero(anchor.noisy_label)
    if len(positives) == 0:
        raise ValueError("anchor has no noisy positives")
    shared = int(positives[rng.integers(0, len(positives))])
    pool = class_index[shared]
    partners = [int(pool[rng.integers(0, len(pool))]) for _ in range(k - 1)]
    return CandidateSet(
        anchor_id=anchor.sample_id,
        shared_class=shared,
        member_ids=[anchor.sample_id] + partners,
    )


def maybe_stitch(
    anchor: TokenBagSample,
    dataset: Sequence[TokenBagSample],
    class_index: Sequence[np.ndarray],
    mode: StitchMode,
    rng: np.random.Generator,
) -> StitchedSample:
    """With probability p build a stitch around the anchor, else pass it through."""
    if mode.active and rng.random() < mode.p:
        cand = select_candidates(anchor, class_index, mode.k, rng)
        members = [dataset[i] for i in cand.member_ids]
        return StitchedSample(
            members=members,
            label=label_union([m.noisy_label for m in members]),
            shared_class=cand.shared_class,
            stitched=True,
        )
    return StitchedSample(
        members=[anchor],
        label=anchor.noisy_label.copy(),
        shared_class=None,
        stitched=False,
    )


# ---------------------------------------------------------------------------
# batched stitched forward / backward
# ---------------------------------------------------------------------------


def pooled_tokens(sample: TokenBagSample) -> np.ndarray:
    return sample.tokens.mean(axis=0)


@dataclass
class StitchCache:
    mode: str
    bb_cache: numcore.MlpCache
    f1_pre: np.ndarray  # (M, d_f) pre-activation of the first head stage
    f1_input: np.ndarray  # (M, h) backbone outputs feeding the head
    f2_input: np.ndarray  # (B, width) input of the output stage
    starts: np.ndarray  # member segment starts per anchor
    counts: np.ndarray  # member count per anchor
    token_counts: np.ndarray  # tokens per forwarded bag (for token gradients)


def _head_stages(head: MlpParams) -> tuple[Layer, Layer]:
    if len(head.layers) != 2:
        raise ValueError("branch heads must have exactly two stages")
    return head.layers[0], head.layers[1]


def _layer_fwd(x: np.ndarray, layer: Layer) -> tuple[np.ndarray, np.ndarray]:
    pre = x @ layer.weight.T + layer.bias
    out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return out, pre


def forward_pooled_batch(
    pooled: np.ndarray,
    counts: np.ndarray,
    mode_name: str,
    backbone: MlpParams,
    head: MlpParams,
    token_counts: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, StitchCache]:
    """Core forward over already-pooled rows.

    For the feature modes pooled holds one row per member and counts gives
    members per anchor; for off/input_concat pooled already holds one merged
    row per anchor and counts must be all ones.
    """
    f1, f2 = _head_stages(head)
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    if token_counts is None:
        token_counts = np.ones(pooled.shape[0], dtype=np.int64)

    hidden, bb_cache = numcore.mlp_forward(pooled, backbone)
    inter, f1_pre = _layer_fwd(hidden, f1)

    if mode_name == "feature_average":
        merged = np.add.reduceat(inter, starts, axis=0) / counts[:, None]
    elif mode_name == "feature_concat":
        if not (counts == counts[0]).all():
            raise ValueError("feature_concat requires a uniform member count")
        merged = inter.reshape(len(counts), counts[0] * inter.shape[1])
    elif mode_name in ("input_concat", "off"):
        merged = inter
    else:  # pragma: no cover - guarded by StitchMode validation
        raise ValueError(f"unknown stitch mode {mode_name!r}")

    if merged.shape[1] != f2.in_dim:
        raise ValueError(
            f"head output stage expects width {f2.in_dim}, got {merged.shape[1]}; "
            "feature_concat needs a head sized for k * feature width"
        )
    logits, _ = _layer_fwd(merged, f2)
    return logits, StitchCache(
        mode=mode_name,
        bb_cache=bb_cache,
        f1_pre=f1_pre,
        f1_input=hidden,
        f2_input=merged,
        starts=starts,
        counts=counts,
        token_counts=token_counts,
    )


def stitch_forward_batch(
    plans: Sequence[StitchedSample],
    backbone: MlpParams,
    head: MlpParams,
    mode: StitchMode,
) -> tuple[np.ndarray, StitchCache]:
    """Forward a batch of (possibly stitched) samples through backbone + head.

    input_concat merges each plan's token bags before pooling; the feature
    modes forward every member and combine the first-stage head features.
    Returns (logits (B, C), cache for the exact reverse pass).
    """
    if mode.mode == "input_concat":
        pooled = np.stack(
            [np.concatenate([m.tokens for m in p.members]).mean(axis=0) for p in plans]
        )
        token_counts = np.asarray(
            [sum(m.tokens.shape[0] for m in p.members) for p in plans]
        )
        counts = np.ones(len(plans), dtype=np.int64)
    else:
        pooled = np.stack([pooled_tokens(m) for p in plans for m in p.members])
        token_counts = np.asarray(
            [m.tokens.shape[0] for p in plans for m in p.members]
        )
        counts = np.asarray([len(p.members) for p in plans])
    return forward_pooled_batch(
        pooled, counts, mode.mode, backbone, head, token_counts
    )


@dataclass
class StitchGrads:
    backbone: list[tuple[np.ndarray, np.ndarray]]
    head: list[tuple[np.ndarray, np.ndarray]]
    pooled: np.ndarray  # gradient wrt the pooled vectors that were forwarded
    token_counts: np.ndarray


def stitch_backward_batch(
    grad_logits: np.ndarray,
    backbone: MlpParams,
    head: MlpParams,
    cache: StitchCache,
) -> StitchGrads:
    """Exact reverse pass through the stitched forward."""
    f1, f2 = _head_stages(head)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (len(cache.counts), f2.out_dim):
        raise ValueError("stale or mismatched cache: logit gradient shape differs")

    dW2 = g.T @ cache.f2_input
    db2 = g.sum(axis=0)
    dmerged = g @ f2.weight

    if cache.mode == "feature_average":
        dinter = np.repeat(dmerged / cache.counts[:, None], cache.counts, axis=0)
    elif cache.mode == "feature_concat":
        dinter = dmerged.reshape(-1, cache.f1_pre.shape[1])
    else:
        dinter = dmerged

    dpre = dinter * (cache.f1_pre > 0.0) if f1.activation == "relu" else dinter
    dW1 = dpre.T @ cache.f1_input
    db1 = dpre.sum(axis=0)
    dhidden = dpre @ f1.weight

    bb_grads, dpooled = numcore.mlp_backward(dhidden, backbone, cache.bb_cache)
    return StitchGrads(
        backbone=bb_grads,
        head=[(dW1, db1), (dW2, db2)],
        pooled=dpooled,
        token_counts=cache.token_counts,
    )


def pooled_forward_batch(
    pooled: np.ndarray, backbone: MlpParams, head: MlpParams
) -> tuple[np.ndarray, StitchCache]:
    """Plain dense forward over already-pooled vectors (no member structure);
    shares the stitch cache format so stitch_backward_batch applies."""
    ones = np.ones(pooled.shape[0], dtype=np.int64)
    return forward_pooled_batch(pooled, ones, "off", backbone, head)


def stitch_forward(
    members: Sequence[TokenBagSample],
    mode: StitchMode,
    backbone: MlpParams,
    head: MlpParams,
) -> tuple[np.ndarray, StitchCache]:
    """Single stitched sample; returns (logits (C,), cache)."""
    if not mode.active:
        raise ValueError("stitch_forward requires an active stitch mode")
    plan = StitchedSample(
        members=list(members),
        label=label_union([m.noisy_label for m in members]),
        shared_class=None,
        stitched=True,
    )
    logits, cache = stitch_forward_batch([plan], backbone, head, mode)
    return logits[0], cache
