"""Declarative experiment configuration.

A single INI-style file (key = value under [section] headers) feeds every
knob; dotted command-line overrides like ``--set stitch.p=0.5`` replace
individual values, and a method preset supplies the structural choices
(which branches exist, their losses, whether stitching / pseudo-labeling /
mixup are active). Precedence, lowest to highest: built-in defaults, config
file, method preset, --set overrides, direct flags.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .colearn import (
    BranchSpec,
    MixupConfig,
    ModelDims,
    PseudoLabelConfig,
    TrainConfig,
)
from .losses import FocalHyperParams
from .numcore import LrSchedule
from .stitchup import StitchMode
from .synthgen import GeneratorConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


DEFAULTS: dict[str, dict[str, object]] = {
    "dataset": {
        "classes": 20,
        "token_dim": 24,
        "pareto_exponent": 1.4,
        "max_count": 300,
        "min_count": 8,
        "groups": 5,
        "background_tokens": 2,
        "token_noise_sigma": 0.6,
        "cooccur_prob": 0.25,
        "test_quota": 30,
        "seed": 0,
        "max_total": None,
    },
    "noise": {
        "gamma": 0.5,
    },
    "model": {
        "backbone_hidden": 48,
        "backbone_out": 32,
        "head_hidden": 32,
    },
    "train": {
        "epochs": 8,
        "base_lr": 0.08,
        "warmup_iters": 100,
        "warmup_ratio": 1.0 / 3.0,
        "decay_epochs": [5, 7],
        "decay_factor": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "reference_batch": 32,
        "eval_interval": 50,
        "noise_window": 10,
        "update_mode": "combined",
        "track_noise": True,
        "seed": 1,
    },
    "branches": {
        "random": "uniform",
        "balanced": "class_rebalanced",
        "random_batch": 32,
        "balanced_batch": 256,
    },
    "loss": {
        "random_branch": "bce",
        "balanced_branch": "db_focal",
    },
    "loss.db": {
        "lambda": 5.0,
        "theta": 0.1,
        "phi": 6.0,
        "mu": 0.3,
        "kappa": 0.05,
    },
    "loss.focal": {
        "focusing": 2.0,
        "weighting": 2.0,
    },
    "stitch": {
        "mode": "feature_average",
        "k": 2,
        "p": 1.0,
    },
    "pl": {
        "mode": "cross",
        "alpha": 0.8,
        "beta": 0.2,
        "start_iter": 0,
    },
    "mixup": {
        "alpha": 0.2,
    },
    "ensemble": {
        "tau": 0.1,
    },
    "experiment": {
        "methods": ["ours"],
        "gammas": [0.5],
        "seeds": [1, 2, 3, 4, 5],
        "workers": 0,
    },
    "report": {
        "plots": True,
    },
}

METHODS = (
    "ours",
    "erm",
    "focal",
    "rs",
    "rs_focal",
    "db",
    "db_focal",
    "two_branch_baseline",
    "two_branch_stitch",
    "two_branch_pl",
    "mixup_ablation",
)

# structural choices per method: which branches run, which loss each uses
# (None keeps the configured loss), and whether stitch / pl / mixup are active
_METHOD_STRUCTURE = {
    "erm": dict(random=True, balanced=False, random_loss="bce", stitch=False, pl=False),
    "focal": dict(random=True, balanced=False, random_loss="focal", stitch=False, pl=False),
    "rs": dict(random=False, balanced=True, balanced_loss="bce", stitch=False, pl=False),
    "rs_focal": dict(random=False, balanced=True, balanced_loss="focal", stitch=False, pl=False),
    "db": dict(random=False, balanced=True, balanced_loss="db", stitch=False, pl=False),
    "db_focal": dict(random=False, balanced=True, balanced_loss="db_focal", stitch=False, pl=False),
    "two_branch_baseline": dict(random=True, balanced=True, stitch=False, pl=False),
    "two_branch_stitch": dict(random=True, balanced=True, stitch=True, pl=False),
    "two_branch_pl": dict(random=True, balanced=True, stitch=False, pl=True),
    "ours": dict(random=True, balanced=True, stitch=True, pl=True),
    "mixup_ablation": dict(random=True, balanced=True, stitch=False, pl=False, mixup=True),
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, list):
        if not raw:
            return []
        items = [v.strip() for v in raw.split(",")]
        if default and isinstance(default[0], int):
            return [int(v) for v in items]
        if default and isinstance(default[0], float):
            return [float(v) for v in items]
        return items
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:  # optional integer knobs (e.g. dataset.max_total)
        if raw.lower() in ("", "none"):
            return None
        return int(raw)
    return raw


@dataclass
class Config:
    """Typed view over the layered section/key table."""

    data: dict[str, dict[str, object]] = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: Optional[list[str]] = None) -> "Config":
        data = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(str(path))
            if not read:
                raise ConfigError(f"config file not found: {path}")
            for section in parser.sections():
                if section not in data:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser[section].items():
                    if key not in data[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    try:
                        data[section][key] = _parse_value(raw, DEFAULTS[section][key])
                    except (ValueError, ConfigError) as e:
                        raise ConfigError(f"bad value for {section}.{key}: {e}")
        cfg = cls(data=data)
        for item in overrides or []:
            cfg.apply_override(item)
        return cfg

    def apply_override(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key must be dotted: {dotted!r}")
        section, key = dotted.rsplit(".", 1)
        if section not in self.data or key not in self.data[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            self.data[section][key] = _parse_value(raw, DEFAULTS[section][key])
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}")

    def get(self, section: str, key: str):
        return self.data[section][key]

    def copy(self) -> "Config":
        return Config(data={s: dict(kv) for s, kv in self.data.items()})

    def as_nested_dict(self) -> dict:
        return {s: dict(kv) for s, kv in self.data.items()}


def generator_config(cfg: Config) -> GeneratorConfig:
    d = cfg.data["dataset"]
    return GeneratorConfig(
        n_classes=d["classes"],
        token_dim=d["token_dim"],
        pareto_exponent=d["pareto_exponent"],
        max_count=d["max_count"],
        min_count=d["min_count"],
        groups=d["groups"],
        background_tokens=d["background_tokens"],
        token_noise_sigma=d["token_noise_sigma"],
        cooccur_prob=d["cooccur_prob"],
        seed=d["seed"],
        test_quota=d["test_quota"],
        max_total=d["max_total"],
    )


def effective_tau(cfg: Config, method: str) -> float:
    s = _METHOD_STRUCTURE[method]
    if not s.get("balanced", True):
        return 1.0
    if not s.get("random", True):
        return 0.0
    return float(cfg.get("ensemble", "tau"))


def train_config(cfg: Config, method: str, seed: Optional[int] = None) -> TrainConfig:
    if method not in METHODS:
        raise ConfigError(
            f"unknown method {method!r}; choose one of {', '.join(METHODS)}"
        )
    s = _METHOD_STRUCTURE[method]
    t = cfg.data["train"]
    b = cfg.data["branches"]
    l = cfg.data["loss"]

    branch_random = None
    if s.get("random", True):
        branch_random = BranchSpec(
            sampler=b["random"],
            loss=s.get("random_loss") or l["random_branch"],
            batch_size=b["random_batch"],
        )
    branch_balanced = None
    if s.get("balanced", True):
        branch_balanced = BranchSpec(
            sampler=b["balanced"],
            loss=s.get("balanced_loss") or l["balanced_branch"],
            batch_size=b["balanced_batch"],
        )

    if s.get("stitch", False):
        mode = cfg.get("stitch", "mode")
        if mode == "off":
            mode = "feature_average"
        stitch = StitchMode(mode=mode, k=cfg.get("stitch", "k"), p=cfg.get("stitch", "p"))
    else:
        stitch = StitchMode(mode="off", k=max(2, cfg.get("stitch", "k")), p=0.0)

    if s.get("pl", False):
        pl_mode = cfg.get("pl", "mode")
        if pl_mode == "off":
            pl_mode = "cross"
        if pl_mode == "cross" and (branch_random is None or branch_balanced is None):
            pl_mode = "self"
        pl = PseudoLabelConfig(
            alpha=cfg.get("pl", "alpha"),
            beta=cfg.get("pl", "beta"),
            mode=pl_mode,
            start_iter=cfg.get("pl", "start_iter"),
        )
    else:
        pl = PseudoLabelConfig(
            alpha=cfg.get("pl", "alpha"), beta=cfg.get("pl", "beta"), mode="off"
        )

    mixup = MixupConfig(alpha=cfg.get("mixup", "alpha")) if s.get("mixup") else None

    schedule = LrSchedule(
        base_lr=t["base_lr"],
        warmup_iters=t["warmup_iters"],
        warmup_ratio=t["warmup_ratio"],
        decay_epochs=tuple(t["decay_epochs"]),
        decay_factor=t["decay_factor"],
        total_epochs=t["epochs"],
    )
    m = cfg.data["model"]
    db = cfg.data["loss.db"]
    fo = cfg.data["loss.focal"]
    out = TrainConfig(
        epochs=t["epochs"],
        branch_random=branch_random,
        branch_balanced=branch_balanced,
        schedule=schedule,
        stitch=stitch,
        pl=pl,
        tau=effective_tau(cfg, method),
        seed=t["seed"] if seed is None else seed,
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        model=ModelDims(
            backbone_hidden=m["backbone_hidden"],
            backbone_out=m["backbone_out"],
            head_hidden=m["head_hidden"],
        ),
        mixup=mixup,
        update_mode=t["update_mode"],
        reference_batch=t["reference_batch"],
        eval_interval=t["eval_interval"],
        noise_window=t["noise_window"],
        track_noise=t["track_noise"],
        db=dict(
            lam=db["lambda"], theta=db["theta"], phi=db["phi"],
            mu=db["mu"], kappa=db["kappa"],
        ),
        focal=FocalHyperParams(
            focusing=fo["focusing"], weighting=fo["weighting"]
        ),
    )
    try:
        out.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    return out


@dataclass
class RunSpec:
    """One training run: a method preset plus config overrides."""

    label: str
    method: str
    overrides: dict[str, str] = field(default_factory=dict)


ABLATION_KINDS = (
    "components",
    "k_sweep",
    "p_sweep",
    "stitch_mode",
    "sampling_prior",
    "self_vs_cross",
    "mixup",
)


def ablation_matrix(kind: str) -> list[RunSpec]:
    """Expand one ablation axis into run specs with its standard sweep values."""
    if kind == "components":
        return [
            RunSpec("two_branch_baseline", "two_branch_baseline"),
            RunSpec("two_branch_stitch", "two_branch_stitch"),
            RunSpec("two_branch_pl", "two_branch_pl"),
            RunSpec("ours", "ours"),
        ]
    if kind == "k_sweep":
        return [
            RunSpec(f"stitch_k{k}", "two_branch_stitch", {"stitch.k": str(k)})
            for k in (2, 3, 4, 5)
        ]
    if kind == "p_sweep":
        return [
            RunSpec(
                f"stitch_p{str(p).replace('.', '_')}",
                "two_branch_stitch",
                {"stitch.p": str(p)},
            )
            for p in (0.0, 0.3, 0.5, 0.8, 1.0)
        ]
    if kind == "stitch_mode":
        out = [
            RunSpec(f"stitch_{m}", "two_branch_stitch", {"stitch.mode": m})
            for m in ("feature_average", "feature_concat", "input_concat")
        ]
        out.append(RunSpec("no_stitch", "two_branch_baseline"))
        return out
    if kind == "sampling_prior":
        combos = {
            "rb": ("uniform", "class_rebalanced"),
            "rr": ("uniform", "uniform"),
            "bb": ("class_rebalanced", "class_rebalanced"),
        }
        out = []
        for cname, (sf, sg) in combos.items():
            for pl in ("off", "self", "cross"):
                method = "two_branch_stitch" if pl == "off" else "ours"
                overrides = {"branches.random": sf, "branches.balanced": sg}
                if pl != "off":
                    overrides["pl.mode"] = pl
                out.append(RunSpec(f"sampling_{cname}_pl_{pl}", method, overrides))
        return out
    if kind == "self_vs_cross":
        return [
            RunSpec("pl_self", "ours", {"pl.mode": "self"}),
            RunSpec("pl_cross", "ours", {"pl.mode": "cross"}),
        ]
    if kind == "mixup":
        return [
            RunSpec("stitch_input", "two_branch_stitch", {"stitch.mode": "input_concat"}),
            RunSpec("mixup", "mixup_ablation"),
            RunSpec("no_aug", "two_branch_baseline"),
        ]
    raise ConfigError(f"unknown ablation kind {kind!r}; choose from {ABLATION_KINDS}")
