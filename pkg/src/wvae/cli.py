"""Experiment command line: dataset generation, training, evaluation and
sweeps, all reproducible from (config, seed).

Every command echoes its effective configuration into the output directory;
re-running from that echo reproduces the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import evaluation, training
from .config import (
    ExperimentConfig,
    apply_override,
    load_config,
    save_config,
)
from .model import WvaeModel
from .simdata import assemble_dataset, load_dataset, make_pilots, save_dataset


def _build_dataset(config: ExperimentConfig):
    ds = config.dataset
    return assemble_dataset(
        k=ds.k,
        n_train=ds.n_train,
        n_test=ds.n_test,
        csi=ds.csi_config(),
        seed=config.seed,
        traffic_length=ds.traffic_length,
        band_rate=ds.band_rate,
        base_rate=ds.base_rate,
        band_width=ds.band_width,
    )


def _echo_config(out_dir, config: ExperimentConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), config)


def cmd_gen(config: ExperimentConfig, args) -> int:
    train, test = _build_dataset(config)
    _echo_config(args.out, config)
    save_dataset(
        args.out,
        train,
        test,
        config.dataset.csi_config(),
        make_pilots(config.seed, config.dataset.csi_config()),
    )
    dims = "x".join(str(mat.shape[1]) for _, mat in train.views)
    print(
        f"gen: wrote {args.out} (n_train={train.n}, n_test={test.n}, "
        f"k={config.dataset.k}, dims={dims})"
    )
    return 0


def cmd_train(config: ExperimentConfig, args) -> int:
    train_ds, test_ds, _ = load_dataset(args.data)
    tc = config.train_config(n_views=len(train_ds.views))
    _echo_config(args.out, config)
    print(
        f"train: {tc.regime}, {tc.resolved_trials} trials x {tc.epochs} epochs, "
        f"workers={args.threads}"
    )
    reports, selected = training.run_trials(
        tc, train_ds, test_dataset=test_ds, workers=args.threads
    )
    for report in reports:
        training.write_trajectory_csv(
            os.path.join(args.out, f"trial_{report.trial_index:03d}.csv"), report
        )
    training.write_selection_json(
        os.path.join(args.out, "selection.json"), tc, reports, selected
    )
    model = training.model_from_report(tc, train_ds, reports[selected])
    model.save(os.path.join(args.out, "checkpoint"))
    print(
        f"train: selected trial {selected} "
        f"(metric={reports[selected].metric!r}); checkpoint written"
    )
    return 0


def _check_compatible(model: WvaeModel, dataset) -> None:
    if len(model.view_specs) != len(dataset.views):
        raise ValueError(
            f"checkpoint has {len(model.view_specs)} views, "
            f"dataset has {len(dataset.views)}"
        )
    for vi, (spec, (family, mat)) in enumerate(zip(model.view_specs, dataset.views)):
        if spec.dim != mat.shape[1]:
            raise ValueError(
                f"view {vi}: checkpoint dim {spec.dim} != dataset dim {mat.shape[1]}"
            )
        compatible = spec.family == family or (
            spec.family.startswith("gaussian") and family.startswith("gaussian")
        )
        if not compatible:
            raise ValueError(
                f"view {vi}: checkpoint family {spec.family} does not accept "
                f"{family} data"
            )
    if dataset.labels is not None:
        k = int(dataset.labels.max()) + 1
        if model.z_card != k:
            raise ValueError(
                f"checkpoint |Z|={model.z_card} does not match the dataset's "
                f"{k} classes"
            )


def cmd_eval(config: ExperimentConfig, args) -> int:
    _, test_ds, _ = load_dataset(args.data)
    model = WvaeModel.load(args.checkpoint)
    _check_compatible(model, test_ds)
    result = evaluation.evaluate_model(model, test_ds)
    _echo_config(args.out, config)
    evaluation.write_metrics_csv(
        os.path.join(args.out, "metrics.csv"),
        [
            {
                "experiment": "eval",
                "pnr_db": config.dataset.pnr_db,
                "regime": config.train.regime,
                "alpha_traffic": _alpha_traffic(config),
                "accuracy": result["accuracy"],
                "loss": float("nan"),
            }
        ],
    )
    confusion = result["confusion"]
    with open(os.path.join(args.out, "confusion.csv"), "w") as fh:
        fh.write("true\\matched," + ",".join(map(str, range(confusion.shape[1]))) + "\n")
        for label, row in enumerate(confusion):
            fh.write(f"{label}," + ",".join(map(str, row)) + "\n")
    print(
        f"eval: matched accuracy={result['accuracy']!r} "
        f"entropy={result['entropy']!r}"
    )
    return 0


def _alpha_traffic(config: ExperimentConfig) -> float:
    a = config.model.alpha_traffic
    return 0.5 if a is None else float(a)


def cmd_sweep_pnr(config: ExperimentConfig, args) -> int:
    grid = config.sweep.pnr_grid_db
    if not grid:
        raise ValueError("PNR grid is empty")
    _echo_config(args.out, config)
    rows = []
    for pnr_db in grid:
        point = replace(config, dataset=replace(config.dataset, pnr_db=float(pnr_db)))
        train_ds, test_ds = _build_dataset(point)
        tc = point.train_config(n_views=len(train_ds.views))
        reports, selected = training.run_trials(
            tc, train_ds, test_dataset=test_ds, workers=args.threads
        )
        model = training.model_from_report(tc, train_ds, reports[selected])
        result = evaluation.evaluate_model(model, test_ds)
        rows.append(
            {
                "experiment": "sweep-pnr",
                "pnr_db": float(pnr_db),
                "regime": tc.regime,
                "alpha_traffic": _alpha_traffic(point),
                "accuracy": result["accuracy"],
                "loss": reports[selected].final_loss,
            }
        )
        print(
            f"sweep-pnr: pnr={pnr_db} dB accuracy={result['accuracy']!r} "
            f"loss={reports[selected].final_loss!r}"
        )
    evaluation.write_metrics_csv(os.path.join(args.out, "results.csv"), rows)
    return 0


def cmd_detect_k(config: ExperimentConfig, args) -> int:
    train_ds, _ = _build_dataset(config)
    z_values = list(range(config.sweep.z_min, config.sweep.z_max + 1))
    tc = replace(
        config.train_config(n_views=len(train_ds.views)),
        trials=config.sweep.detect_trials,
        regime="unsupervised",
    )
    _echo_config(args.out, config)
    result = evaluation.detect_clusters(train_ds, z_values, tc, workers=args.threads)
    with open(os.path.join(args.out, "curve.csv"), "w") as fh:
        fh.write("z,loss\n")
        for z, loss in zip(result.z_values, result.losses):
            fh.write(f"{z},{loss!r}\n")
    with open(os.path.join(args.out, "detection.json"), "w") as fh:
        json.dump(
            {
                "detected_k": result.detected_k,
                "no_sharp_transition": result.detected_k is None,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    if result.detected_k is None:
        print("detect-k: no sharp transition in the tried range")
    else:
        print(f"detect-k: detected k={result.detected_k}")
    return 0


def cmd_baseline(config: ExperimentConfig, args) -> int:
    train_ds, test_ds, manifest = load_dataset(args.data)
    k = args.k if args.k is not None else manifest.get("k")
    if k is None:
        raise ValueError("dataset has no class count; pass --k")
    result = evaluation.baseline_kmeans(train_ds, test_ds, int(k), seed=config.seed)
    _echo_config(args.out, config)
    evaluation.write_metrics_csv(
        os.path.join(args.out, "metrics.csv"),
        [
            {
                "experiment": "baseline-kmeans",
                "pnr_db": config.dataset.pnr_db,
                "regime": "unsupervised",
                "alpha_traffic": float("nan"),
                "accuracy": result["accuracy"],
                "loss": result["inertia"],
            }
        ],
    )
    print(f"baseline: kmeans matched accuracy={result['accuracy']!r}")
    return 0


def cmd_sweep_alpha(config: ExperimentConfig, args) -> int:
    train_ds, test_ds = _build_dataset(config)
    tc = config.train_config(n_views=len(train_ds.views))
    _echo_config(args.out, config)
    rows, best = evaluation.sweep_alpha(
        train_ds, test_ds, tc, config.sweep.alpha_grid, workers=args.threads
    )
    with open(os.path.join(args.out, "alpha.csv"), "w") as fh:
        fh.write("alpha_traffic,accuracy\n")
        for a, acc in rows:
            fh.write(f"{a!r},{acc!r}\n")
    print(f"sweep-alpha: best alpha_traffic={best!r}")
    return 0


_COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic dataset files"),
    "train": (cmd_train, "train and select a model on a generated dataset"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset's test split"),
    "sweep-pnr": (cmd_sweep_pnr, "accuracy versus PNR over the configured grid"),
    "detect-k": (cmd_detect_k, "loss versus cluster count and knee detection"),
    "baseline": (cmd_baseline, "K-means baseline on cascaded features"),
    "sweep-alpha": (cmd_sweep_alpha, "accuracy versus view weighting"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wvae", description="multi-layer fingerprint clustering experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument(
            "--threads",
            type=int,
            default=max(1, os.cpu_count() or 1),
            help="worker cap for trials and sweeps",
        )
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, e.g. --set train.epochs=5",
        )
        if name in ("train", "eval", "baseline"):
            p.add_argument("--data", required=True, help="dataset directory")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        if name == "baseline":
            p.add_argument("--k", type=int, default=None, help="cluster count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        for assignment in args.overrides:
            apply_override(config, assignment)
        if args.seed is not None:
            config.seed = args.seed
        if args.threads < 1:
            raise ValueError("--threads must be positive")
        return _COMMANDS[args.command][0](config, args)
    except Exception as err:  # one-line machine-parseable failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
