"""Two-branch co-learning loop: heterogeneous sampling, stitch augmentation,
threshold pseudo-labeling with cross guidance, shared-backbone updates, and
the ensembled inference path.

Each iteration draws one uniform batch and one class-rebalanced batch,
optionally stitches every anchor, relabels members from the peer branch's
probabilities (trust above alpha, reject below beta, keep otherwise), unions
member labels, and applies one SGD step whose backbone gradient accumulates
both branch losses. History rows and noise-window records stream to CSV when
an output directory is given; checkpoints capture parameters, optimizer
buffers and every random stream, so a resumed run is bit-identical to an
uninterrupted one as long as the eval/noise windows align with the split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numcore
from .evalx import (
    ApResult,
    NoiseLevelTracker,
    map_from_scores,
    write_noise_csv,
)
from .losses import (
    DbHyperParams,
    FocalHyperParams,
    loss_batch_fn,
    sigmoid,
)
from .numcore import LrSchedule, MlpParams, OptimState, init_mlp, lr_at, sgd_step
from .sampling import Sampler, positives_by_class
from .stitchup import (
    StitchMode,
    StitchedSample,
    forward_pooled_batch,
    maybe_stitch,
    pooled_forward_batch,
    stitch_backward_batch,
)
from .synthgen import DatasetBundle, TokenBagSample

CHECKPOINT_VERSION = 1

PL_MODES = ("cross", "self", "off")


@dataclass
class PseudoLabelConfig:
    alpha: float = 0.8
    beta: float = 0.2
    mode: str = "cross"
    start_iter: int = 0

    def __post_init__(self):
        if self.mode not in PL_MODES:
            raise ValueError(f"unknown pseudo-label mode {self.mode!r}")
        if self.mode != "off" and not 0.0 <= self.beta < self.alpha <= 1.0:
            raise ValueError("thresholds must satisfy 0 <= beta < alpha <= 1")


@dataclass
class BranchSpec:
    sampler: str  # uniform | class_rebalanced
    loss: str  # bce | focal | db | db_focal
    batch_size: int


@dataclass
class ModelDims:
    backbone_hidden: int = 48
    backbone_out: int = 32
    head_hidden: int = 32


@dataclass
class MixupConfig:
    alpha: float = 0.2  # Beta(alpha, alpha) interpolation weight


@dataclass
class TrainConfig:
    epochs: int = 8
    branch_random: Optional[BranchSpec] = field(
        default_factory=lambda: BranchSpec("uniform", "bce", 32)
    )
    branch_balanced: Optional[BranchSpec] = field(
        default_factory=lambda: BranchSpec("class_rebalanced", "db_focal", 256)
    )
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(base_lr=0.08))
    stitch: StitchMode = field(default_factory=StitchMode)
    pl: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    tau: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    model: ModelDims = field(default_factory=ModelDims)
    mixup: Optional[MixupConfig] = None
    update_mode: str = "combined"  # combined | sequential
    reference_batch: int = 32  # fixes iterations per epoch across methods
    eval_interval: int = 50
    noise_window: int = 10
    track_noise: bool = True
    db: dict = field(
        default_factory=lambda: dict(lam=5.0, theta=0.1, phi=6.0, mu=0.3, kappa=0.05)
    )
    focal: FocalHyperParams = field(default_factory=FocalHyperParams)

    def validate(self) -> None:
        if self.branch_random is None and self.branch_balanced is None:
            raise ValueError("at least one branch must be enabled")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.update_mode not in ("combined", "sequential"):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        two_branch = self.branch_random is not None and self.branch_balanced is not None
        if self.pl.mode == "cross" and not two_branch:
            raise ValueError("cross pseudo-labeling needs both branches")
        if self.stitch.mode == "feature_concat" and self.stitch.p < 1.0:
            raise ValueError(
                "feature_concat cannot mix stitched and passthrough samples; "
                "set stitch.p = 1.0"
            )
        if self.mixup is not None:
            if self.stitch.active:
                raise ValueError("mixup and stitch augmentation are exclusive")
            if self.pl.mode != "off":
                raise ValueError("mixup uses soft labels; pseudo-labeling must be off")
        if self.epochs < 0 or self.reference_batch < 1:
            raise ValueError("epochs must be >= 0 and reference_batch >= 1")


@dataclass
class TwoBranchModel:
    backbone: MlpParams
    head_f: Optional[MlpParams]
    head_g: Optional[MlpParams]
    concat_k: int = 1

    def param_arrays(self) -> list[np.ndarray]:
        arrays = self.backbone.param_arrays()
        if self.head_f is not None:
            arrays += self.head_f.param_arrays()
        if self.head_g is not None:
            arrays += self.head_g.param_arrays()
        return arrays

    def head_logits(self, hidden: np.ndarray, head: MlpParams) -> np.ndarray:
        """Per-sample head forward; tiles the intermediate for concat heads."""
        f1, f2 = head.layers
        pre = hidden @ f1.weight.T + f1.bias
        inter = np.maximum(pre, 0.0) if f1.activation == "relu" else pre
        if self.concat_k > 1:
            inter = np.tile(inter, (1, self.concat_k))
        return inter @ f2.weight.T + f2.bias

    def branch_logits(self, pooled: np.ndarray) -> tuple[
        Optional[np.ndarray], Optional[np.ndarray]
    ]:
        hidden, _ = numcore.mlp_forward(pooled, self.backbone)
        zf = self.head_logits(hidden, self.head_f) if self.head_f is not None else None
        zg = self.head_logits(hidden, self.head_g) if self.head_g is not None else None
        return zf, zg

    def ensemble_logits(self, pooled: np.ndarray, tau: float) -> np.ndarray:
        zf, zg = self.branch_logits(pooled)
        if zf is None:
            return zg
        if zg is None:
            return zf
        return tau * zf + (1.0 - tau) * zg

    def predict_proba(self, samples: Sequence[TokenBagSample], tau: float) -> np.ndarray:
        pooled = np.stack([s.tokens.mean(axis=0) for s in samples])
        return sigmoid(self.ensemble_logits(pooled, tau))


def build_model(
    token_dim: int,
    n_classes: int,
    dims: ModelDims,
    rng: np.random.Generator,
    concat_k: int = 1,
    with_random: bool = True,
    with_balanced: bool = True,
) -> TwoBranchModel:
    backbone = init_mlp(
        [token_dim, dims.backbone_hidden, dims.backbone_out], ["relu", "relu"], rng
    )

    def make_head() -> MlpParams:
        head = init_mlp(
            [dims.backbone_out, dims.head_hidden, n_classes], ["relu", "identity"], rng
        )
        if concat_k > 1:
            wide = init_mlp([dims.head_hidden * concat_k, n_classes], ["identity"], rng)
            head = MlpParams(layers=[head.layers[0], wide.layers[0]])
        return head

    # heads are always drawn in f, g order so that disabling a branch does not
    # change the other branch's initial weights
    head_f = make_head()
    head_g = make_head()
    return TwoBranchModel(
        backbone=backbone,
        head_f=head_f if with_random else None,
        head_g=head_g if with_balanced else None,
        concat_k=concat_k,
    )


def pseudo_label(q, noisy, cfg: PseudoLabelConfig):
    """Trust the network above alpha, reject below beta, keep the label otherwise."""
    q = np.asarray(q, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    out = np.where(q > cfg.alpha, 1.0, np.where(q < cfg.beta, 0.0, noisy))
    return float(out) if out.ndim == 0 else out


def cross_guide(
    members: Sequence[TokenBagSample],
    model: TwoBranchModel,
    own_branch: str,
    cfg: PseudoLabelConfig,
) -> list[np.ndarray]:
    """Pseudo-labels for every member, guided per the configured mode.

    own_branch names the branch consuming the batch ("random" or
    "balanced"); in cross mode the peer branch produces the probabilities,
    in self mode the branch itself does.
    """
    if cfg.mode == "off":
        return [m.noisy_label.astype(np.float64) for m in members]
    if own_branch not in ("random", "balanced"):
        raise ValueError("own_branch must be 'random' or 'balanced'")
    use_random = (own_branch == "balanced") == (cfg.mode == "cross")
    head = model.head_f if use_random else model.head_g
    if head is None:
        raise ValueError("guiding branch is not part of the model")
    pooled = np.stack([m.tokens.mean(axis=0) for m in members])
    hidden, _ = numcore.mlp_forward(pooled, model.backbone)
    q = sigmoid(model.head_logits(hidden, head))
    return [
        pseudo_label(q[i], members[i].noisy_label, cfg) for i in range(len(members))
    ]


def infer(model: TwoBranchModel, sample: TokenBagSample, tau: float) -> np.ndarray:
    """Ensembled class probabilities: sigmoid(tau * f + (1 - tau) * g)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return model.predict_proba([sample], tau)[0]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

METRICS_CSV_FIELDS = (
    "iteration",
    "epoch",
    "lr",
    "loss_random",
    "loss_balanced",
    "map_total",
    "map_head",
    "map_medium",
    "map_tail",
    "map_random",
    "map_balanced",
    "noise_cum",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class TrainResult:
    model: TwoBranchModel
    metrics: list[dict]
    noise_records: list
    final_eval: Optional[ApResult]
    iterations: int


@dataclass
class _Branch:
    name: str  # "random" | "balanced"
    spec: BranchSpec
    head: MlpParams
    sampler: Sampler
    stitch_rng: np.random.Generator
    loss_fn: object
    slot: slice  # positions of this head's arrays in the flat param list


def _segment_bounds(plans: Sequence[StitchedSample]) -> tuple[np.ndarray, np.ndarray]:
    counts = np.asarray([len(p.members) for p in plans])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return starts, counts


class _Trainer:
    def __init__(self, bundle: DatasetBundle, cfg: TrainConfig, out_dir=None):
        cfg.validate()
        self.bundle = bundle
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.C = bundle.n_classes
        self.N = len(bundle.train)
        self.iters_per_epoch = max(1, math.ceil(self.N / cfg.reference_batch))
        self.total_iters = cfg.epochs * self.iters_per_epoch

        ss = np.random.SeedSequence(cfg.seed)
        keys = ss.spawn(6)
        rng_init = np.random.default_rng(keys[0])
        self.rng_mix = np.random.default_rng(keys[5])

        concat_k = cfg.stitch.k if cfg.stitch.mode == "feature_concat" else 1
        self.model = build_model(
            bundle.token_dim,
            self.C,
            cfg.model,
            rng_init,
            concat_k=concat_k,
            with_random=cfg.branch_random is not None,
            with_balanced=cfg.branch_balanced is not None,
        )
        self.params = self.model.param_arrays()
        self.optim = OptimState.for_params(
            self.params, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )

        n_bb = len(self.model.backbone.param_arrays())
        self.bb_slot = slice(0, n_bb)
        cursor = n_bb
        self.branches: list[_Branch] = []
        self.class_index = positives_by_class(bundle.train, self.C)
        db_hp = self._db_hp_if_needed()
        for name, spec, head, skey, stkey in (
            ("random", cfg.branch_random, self.model.head_f, keys[1], keys[3]),
            ("balanced", cfg.branch_balanced, self.model.head_g, keys[2], keys[4]),
        ):
            if spec is None:
                continue
            n_head = len(head.param_arrays())
            self.branches.append(
                _Branch(
                    name=name,
                    spec=spec,
                    head=head,
                    sampler=Sampler(
                        spec.sampler, bundle.train, self.C, np.random.default_rng(skey)
                    ),
                    stitch_rng=np.random.default_rng(stkey),
                    loss_fn=loss_batch_fn(spec.loss, db_hp, cfg.focal),
                    slot=slice(cursor, cursor + n_head),
                )
            )
            cursor += n_head

        self.tracker = NoiseLevelTracker(
            split=bundle.split, n_classes=self.C, window=cfg.noise_window
        )
        # per-sample caches shared by every iteration
        self.pooled_train = np.stack([s.tokens.mean(axis=0) for s in bundle.train])
        self.token_counts = np.asarray([s.tokens.shape[0] for s in bundle.train])
        self.noisy_train = np.stack([s.noisy_label for s in bundle.train]).astype(
            np.float64
        )
        self.clean_train = np.stack([s.clean_label for s in bundle.train]).astype(
            np.float64
        )
        self.test_pooled = (
            np.stack([s.tokens.mean(axis=0) for s in bundle.test])
            if bundle.test
            else None
        )
        self.test_labels = (
            np.stack([s.clean_label for s in bundle.test]) if bundle.test else None
        )
        self.metrics: list[dict] = []
        self.noise_flushed = 0
        self.start_iter = 0

    def _db_hp_if_needed(self) -> Optional[DbHyperParams]:
        kinds = [
            s.loss
            for s in (self.cfg.branch_random, self.cfg.branch_balanced)
            if s is not None
        ]
        if not any(k in ("db", "db_focal") for k in kinds):
            return None
        counts = self.bundle.noisy_counts()
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise ValueError(
                f"classes {empty.tolist()} have no training positives; "
                "distribution-balanced losses are undefined"
            )
        d = self.cfg.db
        return DbHyperParams.from_counts(
            counts,
            n_samples=self.N,
            lam=d["lam"],
            theta=d["theta"],
            phi=d["phi"],
            mu=d["mu"],
            kappa=d["kappa"],
        )

    # -- labels ------------------------------------------------------------

    def _pl_active(self, iteration: int) -> bool:
        return self.cfg.pl.mode != "off" and iteration >= self.cfg.pl.start_iter

    def _training_labels(self, member_ids, starts, cache, branch: _Branch, iteration: int):
        member_noisy = self.noisy_train[member_ids]
        if self._pl_active(iteration):
            pl = self.cfg.pl
            use_random = (branch.name == "balanced") == (pl.mode == "cross")
            guide = self.model.head_f if use_random else self.model.head_g
            if self.cfg.stitch.mode == "input_concat":
                hidden, _ = numcore.mlp_forward(
                    self.pooled_train[member_ids], self.model.backbone
                )
            else:
                hidden = cache.f1_input  # backbone outputs, one row per member
            q = sigmoid(self.model.head_logits(hidden, guide))
            member_labels = pseudo_label(q, member_noisy, pl)
        else:
            member_labels = member_noisy
        labels = np.maximum.reduceat(member_labels, starts, axis=0)
        # a sample stripped of every positive cannot feed the re-balancing
        # denominator; fall back to the plain member-label union
        zero = labels.sum(axis=1) == 0
        if zero.any():
            labels[zero] = np.maximum.reduceat(member_noisy, starts, axis=0)[zero]
        return labels

    # -- one iteration -----------------------------------------------------

    def _branch_pass(self, branch: _Branch, iteration: int):
        spec = branch.spec
        ids = branch.sampler.sample_batch(spec.batch_size).sample_ids
        train = self.bundle.train
        if self.cfg.mixup is not None:
            partners = self.rng_mix.integers(0, self.N, size=len(ids))
            w = self.rng_mix.beta(self.cfg.mixup.alpha, self.cfg.mixup.alpha, len(ids))
            pooled = (
                w[:, None] * self.pooled_train[ids]
                + (1.0 - w[:, None]) * self.pooled_train[partners]
            )
            labels = (
                w[:, None] * self.noisy_train[ids]
                + (1.0 - w[:, None]) * self.noisy_train[partners]
            )
            logits, cache = pooled_forward_batch(pooled, self.model.backbone, branch.head)
            if self.cfg.track_noise:
                clean = (
                    w[:, None] * self.clean_train[ids]
                    + (1.0 - w[:, None]) * self.clean_train[partners]
                )
                self.tracker.add_batch(labels, clean)
        else:
            plans = [
                maybe_stitch(
                    train[i], train, self.class_index, self.cfg.stitch, branch.stitch_rng
                )
                for i in ids
            ]
            member_ids = np.asarray(
                [mid for p in plans for mid in p.member_ids], dtype=np.int64
            )
            starts, counts = _segment_bounds(plans)
            if self.cfg.stitch.mode == "input_concat" and self.cfg.stitch.active:
                # merged-bag pooling: token-count weighted mean of member pools
                tc = self.token_counts[member_ids].astype(np.float64)
                weighted = self.pooled_train[member_ids] * tc[:, None]
                pooled = (
                    np.add.reduceat(weighted, starts, axis=0)
                    / np.add.reduceat(tc, starts)[:, None]
                )
                fcounts = np.ones(len(plans), dtype=np.int64)
                mode_name = "input_concat"
            else:
                pooled = self.pooled_train[member_ids]
                fcounts = counts
                mode_name = self.cfg.stitch.mode if self.cfg.stitch.active else "off"
            logits, cache = forward_pooled_batch(
                pooled, fcounts, mode_name, self.model.backbone, branch.head
            )
            labels = self._training_labels(member_ids, starts, cache, branch, iteration)
            if self.cfg.track_noise:
                clean_union = np.maximum.reduceat(
                    self.clean_train[member_ids], starts, axis=0
                )
                self.tracker.add_batch(
                    labels,
                    clean_union,
                    member_noisy=self.noisy_train[member_ids],
                    member_clean=self.clean_train[member_ids],
                    starts=starts,
                    counts=counts,
                    stitched=np.asarray([p.stitched for p in plans]),
                )

        values, grads = branch.loss_fn(logits, labels)
        loss_value = float(values.mean())
        sg = stitch_backward_batch(
            grads / len(ids), self.model.backbone, branch.head, cache
        )
        flat = [a for pair in sg.backbone for a in pair] + [
            a for pair in sg.head for a in pair
        ]
        return loss_value, flat

    def _apply_update(self, branch_grads: list[tuple[_Branch, list[np.ndarray]]], lr: float):
        n_bb = self.bb_slot.stop
        if self.cfg.update_mode == "combined":
            acc = [np.zeros_like(p) for p in self.params]
            for branch, flat in branch_grads:
                for i in range(n_bb):
                    acc[i] += flat[i]
                for j, idx in enumerate(range(branch.slot.start, branch.slot.stop)):
                    acc[idx] += flat[n_bb + j]
            sgd_step(self.params, acc, self.optim, lr)
            return
        # sequential: update (backbone, head) per branch in declared order,
        # all gradients having been computed before the first update
        for branch, flat in branch_grads:
            idx = list(range(n_bb)) + list(range(branch.slot.start, branch.slot.stop))
            params = [self.params[i] for i in idx]
            grads = flat
            sub = OptimState(
                momentum_buffers=[self.optim.momentum_buffers[i] for i in idx],
                momentum=self.optim.momentum,
                weight_decay=self.optim.weight_decay,
            )
            sgd_step(params, grads, sub, lr)

    # -- evaluation and persistence -----------------------------------------

    def _eval_row(self, iteration: int, epoch: int, lr: float, losses: dict) -> dict:
        row = {
            "iteration": iteration,
            "epoch": epoch,
            "lr": lr,
            "loss_random": losses.get("random"),
            "loss_balanced": losses.get("balanced"),
            "map_total": None,
            "map_head": None,
            "map_medium": None,
            "map_tail": None,
            "map_random": None,
            "map_balanced": None,
            "noise_cum": self.tracker.cumulative_noise if self.cfg.track_noise else None,
        }
        if self.test_pooled is None:
            return row
        hidden, _ = numcore.mlp_forward(self.test_pooled, self.model.backbone)
        zf = (
            self.model.head_logits(hidden, self.model.head_f)
            if self.model.head_f is not None
            else None
        )
        zg = (
            self.model.head_logits(hidden, self.model.head_g)
            if self.model.head_g is not None
            else None
        )
        if zf is None:
            z = zg
        elif zg is None:
            z = zf
        else:
            z = self.cfg.tau * zf + (1.0 - self.cfg.tau) * zg
        res = map_from_scores(sigmoid(z), self.test_labels, self.bundle.split)
        row.update(
            map_total=res.map_total,
            map_head=res.map_head,
            map_medium=res.map_medium,
            map_tail=res.map_tail,
        )
        if zf is not None:
            row["map_random"] = map_from_scores(
                sigmoid(zf), self.test_labels, self.bundle.split
            ).map_total
        if zg is not None:
            row["map_balanced"] = map_from_scores(
                sigmoid(zg), self.test_labels, self.bundle.split
            ).map_total
        self._last_eval = res
        return row

    def _open_sinks(self, resume: bool):
        self._metrics_fh = self._noise_fh = None
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume else "w"
        self._metrics_fh = open(self.out_dir / "metrics.csv", mode, newline="")
        self._noise_fh = open(self.out_dir / "noise_level.csv", mode, newline="")
        if not resume:
            self._metrics_fh.write(",".join(METRICS_CSV_FIELDS) + "\n")
            from .evalx import NOISE_CSV_FIELDS

            self._noise_fh.write(",".join(NOISE_CSV_FIELDS) + "\n")

    def _write_metrics_row(self, row: dict):
        if self._metrics_fh is None:
            return
        self._metrics_fh.write(
            ",".join(_fmt(row[k]) for k in METRICS_CSV_FIELDS) + "\n"
        )

    def _write_noise_records(self):
        if self._noise_fh is None:
            self.noise_flushed = len(self.tracker.records)
            return
        for rec in self.tracker.records[self.noise_flushed :]:
            self._noise_fh.write(
                ",".join(
                    _fmt(v)
                    for v in (
                        rec.iteration,
                        rec.noise_total,
                        rec.noise_head,
                        rec.noise_medium,
                        rec.noise_tail,
                        rec.reduced_count,
                        rec.introduced_count,
                    )
                )
                + "\n"
            )
        self.noise_flushed = len(self.tracker.records)

    def _dump_divergence(self, iteration: int, losses: dict):
        if self.out_dir is None:
            return
        state = {
            "iteration": iteration,
            "losses": {k: repr(v) for k, v in losses.items()},
            "lr_base": self.cfg.schedule.base_lr,
            "seed": self.cfg.seed,
        }
        with open(self.out_dir / "divergence.json", "w") as fh:
            json.dump(state, fh, indent=1)

    def rng_states(self) -> dict:
        states = {"mixup": self.rng_mix.bit_generator.state}
        for b in self.branches:
            states[f"sampler_{b.name}"] = b.sampler.rng.bit_generator.state
            states[f"stitch_{b.name}"] = b.stitch_rng.bit_generator.state
        return states

    def load_rng_states(self, states: dict):
        self.rng_mix.bit_generator.state = states["mixup"]
        for b in self.branches:
            b.sampler.rng.bit_generator.state = states[f"sampler_{b.name}"]
            b.stitch_rng.bit_generator.state = states[f"stitch_{b.name}"]

    def run(self, resume_from=None) -> TrainResult:
        resume = resume_from is not None
        if resume:
            load_checkpoint(resume_from, self)
        self._open_sinks(resume)
        self._last_eval = None
        try:
            for t in range(self.start_iter, self.total_iters):
                epoch = t // self.iters_per_epoch
                lr = lr_at(self.cfg.schedule, t, epoch)
                branch_grads = []
                losses = {}
                for branch in self.branches:
                    loss_value, flat = self._branch_pass(branch, t)
                    losses[branch.name] = loss_value
                    branch_grads.append((branch, flat))
                if not all(np.isfinite(v) for v in losses.values()):
                    self._dump_divergence(t, losses)
                    raise FloatingPointError(
                        f"diverged: non-finite loss at iteration {t}"
                    )
                self._apply_update(branch_grads, lr)
                if self.cfg.track_noise:
                    self.tracker.end_iteration(t)
                    self._write_noise_records()
                if (t + 1) % self.cfg.eval_interval == 0 or t == self.total_iters - 1:
                    row = self._eval_row(t, epoch, lr, losses)
                    self.metrics.append(row)
                    self._write_metrics_row(row)
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / "checkpoint.npz", self)
        finally:
            if self._metrics_fh is not None:
                self._metrics_fh.close()
            if self._noise_fh is not None:
                self._noise_fh.close()
        return TrainResult(
            model=self.model,
            metrics=self.metrics,
            noise_records=self.tracker.records,
            final_eval=self._last_eval,
            iterations=self.total_iters,
        )


def train(
    bundle: DatasetBundle,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Train a two-branch model on the bundle; see the module docstring."""
    return _Trainer(bundle, cfg, out_dir=out_dir).run(resume_from=resume_from)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, trainer: _Trainer) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": trainer.total_iters,
        "n_classes": trainer.C,
        "token_dim": trainer.bundle.token_dim,
        "concat_k": trainer.model.concat_k,
        "rng": trainer.rng_states(),
        "tracker": trainer.tracker.state_dict(),
        "noise_flushed": trainer.noise_flushed,
        "model_dims": asdict(trainer.cfg.model),
        "branches": [b.name for b in trainer.branches],
    }
    arrays = {}
    for i, p in enumerate(trainer.params):
        arrays[f"param_{i:03d}"] = p
        arrays[f"buf_{i:03d}"] = trainer.optim.momentum_buffers[i]
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_model(path) -> TwoBranchModel:
    """Rebuild a model from a checkpoint for inference (no trainer state)."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        model = build_model(
            meta["token_dim"],
            meta["n_classes"],
            ModelDims(**meta["model_dims"]),
            np.random.default_rng(0),
            concat_k=meta["concat_k"],
            with_random="random" in meta["branches"],
            with_balanced="balanced" in meta["branches"],
        )
        for i, p in enumerate(model.param_arrays()):
            p[...] = blob[f"param_{i:03d}"]
    return model


def load_checkpoint(path, trainer: _Trainer) -> None:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        if (
            meta["n_classes"] != trainer.C
            or meta["token_dim"] != trainer.bundle.token_dim
            or meta["concat_k"] != trainer.model.concat_k
            or meta["branches"] != [b.name for b in trainer.branches]
        ):
            raise ValueError("checkpoint does not match the configured model")
        for i, p in enumerate(trainer.params):
            saved = blob[f"param_{i:03d}"]
            if saved.shape != p.shape:
                raise ValueError("checkpoint parameter shapes do not match")
            p[...] = saved
            trainer.optim.momentum_buffers[i][...] = blob[f"buf_{i:03d}"]
    trainer.load_rng_states(meta["rng"])
    trainer.tracker.load_state_dict(meta["tracker"])
    trainer.start_iter = meta["iteration"]
    # records before the checkpoint already live in the CSV; do not re-emit
    trainer.tracker.records = []
    trainer.noise_flushed = 0
