"""Experiment runner CLI.

Subcommands: gen-data, train, eval, run, ablate, aggregate, plot. A run
writes its training history (metrics.csv), noise windows (noise_level.csv),
checkpoint and manifest into its own directory, with SVG figures rendered
alongside the CSVs; multi-run commands add results.csv (one row per method,
noise rate and seed), aggregate.csv (mean and 95% band over seeds) and a
plain-text summary table. Independent runs may execute in parallel worker
processes; STITCHLEARN_THREADS caps the worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, colearn, plotting
from .config import (
    ABLATION_KINDS,
    METHODS,
    Config,
    ConfigError,
    RunSpec,
    ablation_matrix,
    effective_tau,
    generator_config,
    train_config,
)
from .evalx import map_from_scores, read_noise_csv
from .synthgen import DatasetBundle, generate_clean, load_dataset, make_noisy_bundle, save_dataset

RESULTS_FIELDS = (
    "method",
    "gamma",
    "seed",
    "map_total",
    "map_head",
    "map_medium",
    "map_tail",
    "map_random",
    "map_balanced",
    "wall_time_s",
)

AGGREGATE_METRICS = (
    "map_total",
    "map_head",
    "map_medium",
    "map_tail",
    "map_random",
    "map_balanced",
)


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def dataset_dir_for(root: Path, gamma: float) -> Path:
    return root / f"dataset_g{gamma:g}"


def ensure_dataset(cfg: Config, gamma: float, root: Path) -> Path:
    """Generate and corrupt the benchmark for one noise rate if absent."""
    target = dataset_dir_for(root, gamma)
    if (target / "meta.json").exists():
        return target
    bundle = make_noisy_bundle(generate_clean(generator_config(cfg)), gamma=gamma)
    save_dataset(bundle, target)
    return target


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


def run_single(
    bundle: DatasetBundle,
    cfg: Config,
    method: str,
    label: str,
    seed: int,
    out_dir: Path,
    plots: bool = True,
    resume_from=None,
) -> dict:
    tc = train_config(cfg, method, seed)
    t0 = time.perf_counter()
    result = colearn.train(bundle, tc, out_dir=out_dir, resume_from=resume_from)
    wall = time.perf_counter() - t0
    last = result.metrics[-1] if result.metrics else {}
    row = {
        "method": label,
        "gamma": bundle.gamma,
        "seed": seed,
        "map_total": last.get("map_total"),
        "map_head": last.get("map_head"),
        "map_medium": last.get("map_medium"),
        "map_tail": last.get("map_tail"),
        "map_random": last.get("map_random"),
        "map_balanced": last.get("map_balanced"),
        "wall_time_s": wall,
    }
    manifest = {
        "version": __version__,
        "label": label,
        "method": method,
        "gamma": bundle.gamma,
        "seed": seed,
        "iterations": result.iterations,
        "wall_time_s": wall,
        "config": cfg.as_nested_dict(),
        "artifacts": ["metrics.csv", "noise_level.csv", "checkpoint.npz"],
        "result": {k: row[k] for k in RESULTS_FIELDS if k not in ("method",)},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
        fh.write("\n")
    if plots:
        if result.noise_records:
            plotting.plot_noise_curves(
                result.noise_records, out_dir / "noise_level.svg",
                title=f"{label} g={bundle.gamma:g} seed={seed}",
            )
        if result.metrics:
            plotting.plot_training_curves(result.metrics, out_dir / "training_curves.svg")
    return row


def _worker(job: tuple) -> dict:
    dataset_dir, data, method, label, seed, out_dir, plots = job
    bundle = load_dataset(dataset_dir)
    cfg = Config(data=data)
    return run_single(bundle, cfg, method, label, seed, Path(out_dir), plots=plots)


# ---------------------------------------------------------------------------
# experiment engine
# ---------------------------------------------------------------------------


def _worker_cap(cfg: Config, n_jobs: int) -> int:
    configured = int(cfg.get("experiment", "workers"))
    cap = os.environ.get("STITCHLEARN_THREADS")
    n = configured if configured > 0 else min(n_jobs, os.cpu_count() or 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def execute_runs(
    base_cfg: Config,
    specs: Sequence[RunSpec],
    out_root: Path,
    gammas: Optional[Sequence[float]] = None,
    seeds: Optional[Sequence[int]] = None,
) -> int:
    out_root.mkdir(parents=True, exist_ok=True)
    gammas = list(gammas if gammas is not None else base_cfg.get("experiment", "gammas"))
    seeds = list(seeds if seeds is not None else base_cfg.get("experiment", "seeds"))
    if not seeds:
        raise ConfigError("experiment.seeds must be non-empty")
    plots = bool(base_cfg.get("report", "plots"))

    jobs = []
    for gamma in gammas:
        dataset_dir = ensure_dataset(base_cfg, gamma, out_root)
        for spec in specs:
            cfg = base_cfg.copy()
            for key, value in spec.overrides.items():
                cfg.apply_override(f"{key}={value}")
            train_config(cfg, spec.method)  # validate before launching anything
            for seed in seeds:
                run_dir = out_root / "runs" / f"{spec.label}__g{gamma:g}__s{seed}"
                jobs.append(
                    (
                        str(dataset_dir),
                        cfg.as_nested_dict(),
                        spec.method,
                        spec.label,
                        seed,
                        str(run_dir),
                        plots,
                    )
                )

    rows: list[dict] = []
    errors: list[dict] = []
    workers = _worker_cap(base_cfg, len(jobs))
    if workers <= 1:
        for job in jobs:
            try:
                rows.append(_worker(job))
            except Exception as e:  # mid-run failure: record and keep going
                errors.append({"run": job[5], "error": f"{type(e).__name__}: {e}"})
                traceback.print_exc(file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_worker, job): job for job in jobs}
            for fut, job in futures.items():
                try:
                    rows.append(fut.result())
                except Exception as e:
                    errors.append({"run": job[5], "error": f"{type(e).__name__}: {e}"})

    rows.sort(key=lambda r: (str(r["method"]), float(r["gamma"]), int(r["seed"])))
    write_results_csv(out_root / "results.csv", rows)
    agg = aggregate_rows(rows)
    write_aggregate_csv(out_root / "aggregate.csv", agg)
    (out_root / "summary.txt").write_text(summary_table(agg))
    if plots and agg:
        plotting.plot_map_vs_gamma(agg, out_root / "map_vs_gamma.svg")
    if errors:
        with open(out_root / "errors.json", "w") as fh:
            json.dump(errors, fh, indent=1)
        print(f"{len(errors)} run(s) failed; see errors.json", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# results / aggregation
# ---------------------------------------------------------------------------


def write_results_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in RESULTS_FIELDS])


def read_results_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for k in RESULTS_FIELDS:
                if k in ("method",):
                    continue
                row[k] = float(raw[k]) if raw.get(k) else None
            row["seed"] = int(float(raw["seed"]))
            out.append(row)
    return out


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    """Mean and 95% band (1.96 * sample std / sqrt(n)) per (method, gamma)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((str(row["method"]), float(row["gamma"])), []).append(row)
    out = []
    for (method, gamma), members in sorted(groups.items()):
        agg = {"method": method, "gamma": gamma, "n_seeds": len(members)}
        for metric in AGGREGATE_METRICS:
            values = [m[metric] for m in members if m.get(metric) is not None]
            if not values:
                agg[f"{metric}_mean"] = None
                agg[f"{metric}_ci95"] = None
                continue
            mean = float(np.mean(values))
            if len(values) > 1:
                band = float(1.96 * np.std(values, ddof=1) / np.sqrt(len(values)))
            else:
                band = 0.0
            agg[f"{metric}_mean"] = mean
            agg[f"{metric}_ci95"] = band
        out.append(agg)
    return out


AGGREGATE_FIELDS = ("method", "gamma", "n_seeds") + tuple(
    f"{m}_{s}" for m in AGGREGATE_METRICS for s in ("mean", "ci95")
)


def write_aggregate_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in AGGREGATE_FIELDS])


def read_aggregate_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_table(agg: Sequence[dict]) -> str:
    header = f"{'method':<24} {'gamma':>6} {'seeds':>5} " + " ".join(
        f"{name:>16}" for name in ("total", "head", "medium", "tail")
    )
    lines = [header, "-" * len(header)]
    for row in agg:
        cells = []
        for metric in ("map_total", "map_head", "map_medium", "map_tail"):
            mean, band = row.get(f"{metric}_mean"), row.get(f"{metric}_ci95")
            cells.append(
                f"{mean:.4f} ±{band:.4f}" if mean is not None else "-"
            )
        lines.append(
            f"{row['method']:<24} {row['gamma']:>6g} {row['n_seeds']:>5} "
            + " ".join(f"{c:>16}" for c in cells)
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = Config.load(args.config, args.set)
    gamma = args.gamma if args.gamma is not None else cfg.get("noise", "gamma")
    if args.seed is not None:
        cfg.apply_override(f"dataset.seed={args.seed}")
    out = Path(args.out)
    bundle = make_noisy_bundle(generate_clean(generator_config(cfg)), gamma=gamma)
    save_dataset(bundle, out)
    clean = bundle.clean_counts()
    noisy = bundle.noisy_counts()
    print(f"wrote dataset to {out}")
    print(f"  train samples : {len(bundle.train)} (test {len(bundle.test)})")
    print(f"  noise rate    : {gamma:g}")
    print(f"  split         : head={list(bundle.split.head)} "
          f"medium={list(bundle.split.medium)} tail={list(bundle.split.tail)}")
    print(f"  clean counts  : {clean.tolist()}")
    print(f"  noisy counts  : {noisy.tolist()}")
    return 0


def cmd_train(args) -> int:
    cfg = Config.load(args.config, args.set)
    gamma = args.gamma if args.gamma is not None else cfg.get("noise", "gamma")
    seed = args.seed if args.seed is not None else cfg.get("train", "seed")
    out = Path(args.out)
    if args.dataset:
        bundle = load_dataset(args.dataset)
        if abs(bundle.gamma - gamma) > 1e-12 and args.gamma is not None:
            raise ConfigError(
                f"dataset was corrupted at gamma={bundle.gamma:g}, requested {gamma:g}"
            )
    else:
        dataset_dir = ensure_dataset(cfg, gamma, out)
        bundle = load_dataset(dataset_dir)
    row = run_single(
        bundle,
        cfg,
        args.method,
        args.method,
        seed,
        out,
        plots=not args.no_plots and bool(cfg.get("report", "plots")),
        resume_from=args.resume,
    )
    print(summary_table(aggregate_rows([row])))
    return 0


def cmd_eval(args) -> int:
    bundle = load_dataset(args.dataset)
    model = colearn.load_model(args.checkpoint)
    tau = args.tau
    scores = model.predict_proba(bundle.test, tau)
    labels = np.stack([s.clean_label for s in bundle.test])
    res = map_from_scores(scores, labels, bundle.split)
    print(f"tau={tau:g}")
    for name, value in (
        ("total", res.map_total),
        ("head", res.map_head),
        ("medium", res.map_medium),
        ("tail", res.map_tail),
    ):
        print(f"  map_{name:<7}: {value if value is not None else '-'}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "ap"])
            for k, ap in enumerate(res.per_class_ap):
                writer.writerow([k, "" if np.isnan(ap) else repr(float(ap))])
        print(f"per-class AP written to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = Config.load(args.config, args.set)
    methods = cfg.get("experiment", "methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in experiment.methods")
    specs = [RunSpec(label=m, method=m) for m in methods]
    return execute_runs(cfg, specs, Path(args.out))


def cmd_ablate(args) -> int:
    cfg = Config.load(args.config, args.set)
    specs = ablation_matrix(args.kind)
    if args.list:
        for spec in specs:
            extra = " ".join(f"{k}={v}" for k, v in spec.overrides.items())
            print(f"{spec.label:<28} method={spec.method} {extra}")
        return 0
    gammas = [args.gamma] if args.gamma is not None else None
    return execute_runs(cfg, specs, Path(args.out), gammas=gammas)


def cmd_aggregate(args) -> int:
    rows = read_results_csv(args.results)
    agg = aggregate_rows(rows)
    out = Path(args.out) if args.out else Path(args.results).parent / "aggregate.csv"
    write_aggregate_csv(out, agg)
    print(summary_table(agg))
    return 0


def cmd_plot(args) -> int:
    made = []
    if args.run:
        run_dir = Path(args.run)
        records = read_noise_csv(run_dir / "noise_level.csv")
        out = Path(args.out) if args.out else run_dir
        if records:
            plotting.plot_noise_curves(records, out / "noise_level.svg")
            made.append(out / "noise_level.svg")
        import csv as _csv

        with open(run_dir / "metrics.csv", newline="") as fh:
            metrics = []
            for raw in _csv.DictReader(fh):
                metrics.append(
                    {
                        k: (float(v) if v else None) if k != "iteration" else int(v)
                        for k, v in raw.items()
                    }
                )
        if metrics:
            plotting.plot_training_curves(metrics, out / "training_curves.svg")
            made.append(out / "training_curves.svg")
    if args.aggregate:
        rows = read_aggregate_csv(args.aggregate)
        out = Path(args.out) if args.out else Path(args.aggregate).parent
        plotting.plot_map_vs_gamma(rows, out / "map_vs_gamma.svg")
        made.append(out / "map_vs_gamma.svg")
    if not made:
        print("nothing to plot: pass --run and/or --aggregate", file=sys.stderr)
        return 2
    for path in made:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchlearn",
        description=(
            "Noisy multi-label long-tailed benchmark runner: synthetic data "
            "generation, two-branch co-learning with stitch augmentation, "
            "mAP evaluation, ablation matrices and report plots."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="INI config file (defaults apply without it)")
            p.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="SECTION.KEY=VALUE",
                help="override one config value, e.g. stitch.p=0.5",
            )

    p = sub.add_parser("gen-data", help="generate the synthetic noisy benchmark")
    add_common(p)
    p.add_argument("--gamma", type=float, help="label noise rate (default: noise.gamma)")
    p.add_argument("--seed", type=int, help="dataset seed (default: dataset.seed)")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one method on one noise rate and seed")
    add_common(p)
    p.add_argument("--method", default="ours", choices=METHODS)
    p.add_argument("--gamma", type=float, help="label noise rate (default: noise.gamma)")
    p.add_argument("--seed", type=int, help="training seed (default: train.seed = 1)")
    p.add_argument("--dataset", help="existing dataset directory (else generated)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint.npz to resume from")
    p.add_argument("--no-plots", action="store_true", help="skip SVG figures")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=float, default=0.1,
                   help="ensemble balance factor (default 0.1)")
    p.add_argument("--out", help="optional per-class AP CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="run the configured experiment matrix")
    add_common(p)
    p.add_argument("--out", required=True, help="experiment output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="run one ablation axis")
    add_common(p)
    p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    p.add_argument("--gamma", type=float, help="restrict to one noise rate")
    p.add_argument("--out", help="experiment output directory")
    p.add_argument("--list", action="store_true", help="print the expanded runs and exit")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("aggregate", help="recompute aggregate.csv from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("plot", help="render SVG figures from run or aggregate CSVs")
    p.add_argument("--run", help="run directory with metrics.csv / noise_level.csv")
    p.add_argument("--aggregate", help="aggregate.csv path")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "ablate" and not args.list and not args.out:
        parser.error("ablate requires --out (or --list)")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
