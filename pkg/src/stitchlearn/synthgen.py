"""Seeded synthetic long-tailed multi-label token-bag benchmark.

Samples are bags of feature tokens: one noisy copy of the class prototype per
positive class plus a few isotropic background tokens. Class sizes follow a
truncated power law; positives co-occur within fixed class groups. Label
corruption flips each clean positive to a co-occurring class with rate gamma
via a row-stochastic transition matrix built from co-occurrence counts.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evalx import SubsetSplit, split_by_counts

DATASET_FORMAT_VERSION = 1
_SAMPLES_MAGIC = b"SLTB"


@dataclass
class ClassSpec:
    class_id: int
    prototype: np.ndarray  # unit-norm direction of dimension d
    target_count: int
    group_id: int


@dataclass
class TokenBagSample:
    tokens: np.ndarray  # (n_tokens, d)
    clean_label: np.ndarray  # uint8 (C,)
    noisy_label: np.ndarray  # uint8 (C,)
    sample_id: int
    primary_class: int


@dataclass
class CoOccurrenceMatrix:
    counts: np.ndarray  # (C, C) non-negative ints, symmetric

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("co-occurrence counts must be square")
        if (self.counts < 0).any():
            raise ValueError("co-occurrence counts must be non-negative")
        if not np.array_equal(self.counts, self.counts.T):
            raise ValueError("co-occurrence counts must be symmetric")


@dataclass
class TransitionMatrix:
    probs: np.ndarray  # (C, C) row-stochastic
    gamma: float


@dataclass
class GeneratorConfig:
    n_classes: int = 20
    token_dim: int = 24
    pareto_exponent: float = 1.4
    max_count: int = 300
    min_count: int = 8
    groups: int = 5
    background_tokens: int = 2
    token_noise_sigma: float = 0.6
    cooccur_prob: float = 0.25
    seed: int = 0
    test_quota: int = 30
    max_total: Optional[int] = None  # optional hard budget on the train size

    def validate(self) -> None:
        if self.n_classes < 3:
            raise ValueError("need at least 3 classes")
        if self.min_count < 1:
            raise ValueError("min_count must be at least 1")
        if self.max_count <= self.min_count:
            raise ValueError("max_count must exceed min_count")
        if not 1 <= self.groups <= self.n_classes:
            raise ValueError("groups must lie in [1, n_classes]")
        if not 0.0 <= self.cooccur_prob <= 1.0:
            raise ValueError("cooccur_prob must lie in [0, 1]")
        if self.background_tokens < 0:
            raise ValueError("background_tokens must be non-negative")
        if self.test_quota < 1:
            raise ValueError("test_quota must be at least 1")


@dataclass
class DatasetBundle:
    train: list[TokenBagSample]
    test: list[TokenBagSample]
    class_specs: list[ClassSpec]
    split: SubsetSplit
    config: GeneratorConfig
    gamma: float = 0.0
    corrupt_seed: Optional[int] = None

    @property
    def n_classes(self) -> int:
        return len(self.class_specs)

    @property
    def token_dim(self) -> int:
        return self.class_specs[0].prototype.shape[0]

    def clean_counts(self) -> np.ndarray:
        return label_matrix(self.train, clean=True).sum(axis=0)

    def noisy_counts(self) -> np.ndarray:
        return label_matrix(self.train, clean=False).sum(axis=0)


def label_matrix(samples: Sequence[TokenBagSample], clean: bool) -> np.ndarray:
    if clean:
        return np.stack([s.clean_label for s in samples]).astype(np.int64)
    return np.stack([s.noisy_label for s in samples]).astype(np.int64)


def class_target_counts(config: GeneratorConfig) -> np.ndarray:
    """Rank-ordered per-class sample quota: max(min_count, round(max * (k+1)^-a))."""
    ranks = np.arange(1, config.n_classes + 1, dtype=np.float64)
    raw = config.max_count * ranks ** (-config.pareto_exponent)
    return np.maximum(config.min_count, np.round(raw)).astype(np.int64)


def group_ids(config: GeneratorConfig) -> np.ndarray:
    """Contiguous class blocks, so co-occurrence pairs neighbouring ranks."""
    return (np.arange(config.n_classes) * config.groups) // config.n_classes


def _draw_sample(
    primary: int,
    groups: np.ndarray,
    prototypes: np.ndarray,
    config: GeneratorConfig,
    rng: np.random.Generator,
    sample_id: int,
) -> TokenBagSample:
    C, d = prototypes.shape
    label = np.zeros(C, dtype=np.uint8)
    label[primary] = 1
    same_group = np.flatnonzero(groups == groups[primary])
    for k in same_group:
        if k != primary and rng.random() < config.cooccur_prob:
            label[k] = 1
    positives = np.flatnonzero(label)
    sigma = config.token_noise_sigma / np.sqrt(d)
    tokens = np.empty((len(positives) + config.background_tokens, d))
    for row, k in enumerate(positives):
        tokens[row] = prototypes[k] + sigma * rng.standard_normal(d)
    for row in range(len(positives), tokens.shape[0]):
        tokens[row] = rng.standard_normal(d) / np.sqrt(d)
    return TokenBagSample(
        tokens=tokens,
        clean_label=label,
        noisy_label=label.copy(),
        sample_id=sample_id,
        primary_class=primary,
    )


def generate_clean(config: GeneratorConfig) -> DatasetBundle:
    """Build the clean benchmark: per-class quotas of primaries, group
    co-occurrence, prototype tokens plus background tokens, and a balanced
    clean test set of test_quota samples per class."""
    config.validate()
    counts = class_target_counts(config)
    if config.max_total is not None:
        if config.n_classes * config.min_count > config.max_total:
            raise ValueError(
                "infeasible counts: n_classes * min_count exceeds max_total"
            )
        if int(counts.sum()) > config.max_total:
            raise ValueError(
                f"infeasible counts: requested {int(counts.sum())} train samples "
                f"exceed max_total={config.max_total}"
            )
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    protos = rng.standard_normal((config.n_classes, config.token_dim))
    if config.token_dim >= config.n_classes:
        # an orthonormal frame keeps class signals separable in the pooled bag
        q, _ = np.linalg.qr(protos.T)
        protos = q.T[: config.n_classes].copy()
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    groups = group_ids(config)
    specs = [
        ClassSpec(
            class_id=k,
            prototype=protos[k],
            target_count=int(counts[k]),
            group_id=int(groups[k]),
        )
        for k in range(config.n_classes)
    ]

    train: list[TokenBagSample] = []
    sid = 0
    for k in range(config.n_classes):
        for _ in range(counts[k]):
            train.append(_draw_sample(k, groups, protos, config, rng, sid))
            sid += 1
    test: list[TokenBagSample] = []
    for k in range(config.n_classes):
        for _ in range(config.test_quota):
            test.append(_draw_sample(k, groups, protos, config, rng, sid))
            sid += 1

    split = split_by_counts(label_matrix(train, clean=True).sum(axis=0))
    return DatasetBundle(
        train=train, test=test, class_specs=specs, split=split, config=config
    )


def build_cooccurrence(
    train: Sequence[TokenBagSample], use_clean: bool = True
) -> CoOccurrenceMatrix:
    """counts[i, j] = number of samples where classes i and j are both positive."""
    if not train:
        raise ValueError("co-occurrence needs a non-empty train set")
    Y = label_matrix(train, clean=use_clean)
    return CoOccurrenceMatrix(counts=Y.T @ Y)


def build_transition(cooc: CoOccurrenceMatrix, gamma: float) -> TransitionMatrix:
    """Row-stochastic flip matrix: stay with 1-gamma, otherwise move to a
    co-occurring class with probability proportional to the pair count.
    Rows with no co-occurring class are absorbing."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    N = cooc.counts.astype(np.float64)
    C = N.shape[0]
    T = np.zeros((C, C))
    off = N.copy()
    np.fill_diagonal(off, 0.0)
    row_sums = off.sum(axis=1)
    for i in range(C):
        if row_sums[i] == 0.0:
            T[i, i] = 1.0
        else:
            T[i] = gamma * off[i] / row_sums[i]
            T[i, i] = 1.0 - gamma
    return TransitionMatrix(probs=T, gamma=gamma)


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    # counter-based stream per sample: scheduling order cannot change draws
    return np.random.Generator(
        np.random.Philox(key=np.uint64(seed), counter=[0, 0, 0, sample_id])
    )


def corrupt_labels(
    clean_label: np.ndarray, T: TransitionMatrix, rng: np.random.Generator
) -> np.ndarray:
    """Flip each clean positive independently through its transition row.

    All flips are applied simultaneously against the clean vector: sources
    that moved are zeroed, targets are set, and a target that is already
    positive stays positive.
    """
    noisy = clean_label.copy()
    positives = np.flatnonzero(clean_label)
    targets = [int(rng.choice(len(T.probs), p=T.probs[i])) for i in positives]
    for i, j in zip(positives, targets):
        if j != i:
            noisy[i] = 0
    for j in targets:
        noisy[j] = 1
    return noisy


def corrupt(
    train: Sequence[TokenBagSample], T: TransitionMatrix, seed: int
) -> list[TokenBagSample]:
    """Return corrupted copies of the train samples; clean labels retained."""
    out = []
    for s in train:
        rng = _sample_rng(seed, s.sample_id)
        out.append(replace(s, noisy_label=corrupt_labels(s.clean_label, T, rng)))
    return out


def make_noisy_bundle(
    bundle: DatasetBundle, gamma: float, corrupt_seed: Optional[int] = None
) -> DatasetBundle:
    """Corrupt a clean bundle's train labels at the given rate.

    Co-occurrence counts feeding the transition matrix come from the clean
    train labels; the head/medium/tail split stays the clean-count split.
    """
    seed = bundle.config.seed if corrupt_seed is None else corrupt_seed
    cooc = build_cooccurrence(bundle.train, use_clean=True)
    T = build_transition(cooc, gamma)
    return replace(
        bundle,
        train=corrupt(bundle.train, T, seed),
        gamma=gamma,
        corrupt_seed=seed,
    )


# ---------------------------------------------------------------------------
# serialization: meta.json + samples.bin + labels_clean.csv + labels_noisy.csv
# ---------------------------------------------------------------------------


def _write_labels_csv(path: Path, samples: Sequence[TokenBagSample], clean: bool):
    C = samples[0].clean_label.shape[0] if samples else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"class_{k}" for k in range(C)])
        for s in samples:
            label = s.clean_label if clean else s.noisy_label
            writer.writerow([s.sample_id] + [int(v) for v in label])


def _read_labels_csv(path: Path) -> dict[int, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[int(row[0])] = np.asarray([int(v) for v in row[1:]], dtype=np.uint8)
    return out


def save_dataset(bundle: DatasetBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = bundle.config
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "n_classes": bundle.n_classes,
        "token_dim": bundle.token_dim,
        "gamma": bundle.gamma,
        "seed": cfg.seed,
        "corrupt_seed": bundle.corrupt_seed,
        "n_train": len(bundle.train),
        "n_test": len(bundle.test),
        "split": bundle.split.as_dict(),
        "class_counts_clean": bundle.clean_counts().tolist(),
        "class_counts_noisy": bundle.noisy_counts().tolist(),
        "target_counts": [s.target_count for s in bundle.class_specs],
        "group_ids": [s.group_id for s in bundle.class_specs],
        "prototypes": [s.prototype.tolist() for s in bundle.class_specs],
        "primary_classes": [s.primary_class for s in bundle.train]
        + [s.primary_class for s in bundle.test],
        "generator_config": {
            "n_classes": cfg.n_classes,
            "token_dim": cfg.token_dim,
            "pareto_exponent": cfg.pareto_exponent,
            "max_count": cfg.max_count,
            "min_count": cfg.min_count,
            "groups": cfg.groups,
            "background_tokens": cfg.background_tokens,
            "token_noise_sigma": cfg.token_noise_sigma,
            "cooccur_prob": cfg.cooccur_prob,
            "seed": cfg.seed,
            "test_quota": cfg.test_quota,
            "max_total": cfg.max_total,
        },
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")

    d = bundle.token_dim
    with open(out / "samples.bin", "wb") as fh:
        fh.write(_SAMPLES_MAGIC)
        fh.write(struct.pack("<IIQ", DATASET_FORMAT_VERSION, d,
                             len(bundle.train) + len(bundle.test)))
        for s in list(bundle.train) + list(bundle.test):
            fh.write(struct.pack("<QQ", s.sample_id, s.tokens.shape[0]))
            fh.write(s.tokens.astype("<f8").tobytes(order="C"))

    _write_labels_csv(out / "labels_clean.csv", list(bundle.train) + list(bundle.test), clean=True)
    _write_labels_csv(out / "labels_noisy.csv", bundle.train, clean=False)


def load_dataset(in_dir) -> DatasetBundle:
    src = Path(in_dir)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    if meta["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta['format_version']}")
    gcfg = meta["generator_config"]
    config = GeneratorConfig(**gcfg)
    d = meta["token_dim"]

    tokens_by_id: dict[int, np.ndarray] = {}
    with open(src / "samples.bin", "rb") as fh:
        if fh.read(4) != _SAMPLES_MAGIC:
            raise ValueError("samples.bin: bad magic")
        version, d_file, n_records = struct.unpack("<IIQ", fh.read(16))
        if version != DATASET_FORMAT_VERSION or d_file != d:
            raise ValueError("samples.bin header does not match meta.json")
        for _ in range(n_records):
            sid, n_tok = struct.unpack("<QQ", fh.read(16))
            raw = fh.read(8 * n_tok * d)
            tokens_by_id[sid] = np.frombuffer(raw, dtype="<f8").reshape(n_tok, d).copy()

    clean = _read_labels_csv(src / "labels_clean.csv")
    noisy = _read_labels_csv(src / "labels_noisy.csv")
    primaries = meta["primary_classes"]

    def build(sid: int) -> TokenBagSample:
        c = clean[sid]
        return TokenBagSample(
            tokens=tokens_by_id[sid],
            clean_label=c,
            noisy_label=noisy.get(sid, c.copy()),
            sample_id=sid,
            primary_class=int(primaries[sid]),
        )

    n_train = meta["n_train"]
    train = [build(i) for i in range(n_train)]
    test = [build(i) for i in range(n_train, n_train + meta["n_test"])]
    specs = [
        ClassSpec(
            class_id=k,
            prototype=np.asarray(meta["prototypes"][k], dtype=np.float64),
            target_count=int(meta["target_counts"][k]),
            group_id=int(meta["group_ids"][k]),
        )
        for k in range(meta["n_classes"])
    ]
    return DatasetBundle(
        train=train,
        test=test,
        class_specs=specs,
        split=SubsetSplit.from_dict(meta["split"]),
        config=config,
        gamma=meta["gamma"],
        corrupt_seed=meta["corrupt_seed"],
    )
