"""Command-line entry points for data generation, training, and experiments.

Every subcommand reads an optional JSON config file; individual flags
override config fields. Exit code is 0 on success, 1 with a diagnostic on
stderr otherwise. Set MILFUSE_JOBS to run independent training runs of an
experiment in parallel.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ExperimentConfig,
    evaluate_model,
    experiment_config_from_dict,
    load_dataset,
    run_ablation,
    run_fusion_curve,
    run_instability,
    run_train_eval,
)
from .milnet import ModelParams
from .synthgen import generate, write_jsonl


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milfuse",
        description="Multi-branch bag-supervised detection: data, training, and studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="JSON config file.")
        p.add_argument("--seed", type=int, default=None, help="Master seed (overrides config).")
        p.add_argument("--out", type=str, default=None, help="Output directory.")

    p = sub.add_parser("gen-data", help="Generate a synthetic dataset (train/test JSONL).")
    add_common(p)

    for name, help_text in (
        ("train", "Train the full model and evaluate it."),
        ("instability", "Train a detector pool and measure disagreement."),
        ("fusion-curve", "CorLoc/consistency of fused detector subsets vs pool size."),
        ("ablate", "Grid over branch count and init strategy."),
    ):
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        p.add_argument("--k", type=int, default=None, help="Detection branch count.")
        p.add_argument("--init", type=str, default=None,
                       choices=("orthogonal", "gaussian"), help="Init strategy.")
        p.add_argument("--refine-stages", type=int, default=None,
                       help="Number of refinement stages.")

    p = sub.add_parser("eval", help="Evaluate a saved checkpoint on a dataset.")
    add_common(p)
    p.add_argument("--params", type=str, required=True, help="Checkpoint params.json.")
    p.add_argument("--data", type=str, required=True,
                   help="Dataset directory with train.jsonl and test.jsonl.")
    return parser


def _load_config(args: argparse.Namespace, experiment: str) -> ExperimentConfig:
    doc = {}
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text())
    doc["experiment"] = experiment
    config = experiment_config_from_dict(doc)

    if args.seed is not None:
        config.seed = args.seed
        config.train = replace(config.train, seed=args.seed,
                               init=replace(config.train.init, seed=args.seed))
    if args.out is not None:
        config.out_dir = args.out
    if getattr(args, "k", None) is not None:
        config.train = replace(config.train, k_branches=args.k)
    if getattr(args, "init", None) is not None:
        config.train = replace(config.train, init=replace(config.train.init, strategy=args.init))
    if getattr(args, "refine_stages", None) is not None:
        config.train = replace(config.train, refine_stages=args.refine_stages)
    return config


def _cmd_gen_data(args: argparse.Namespace) -> None:
    config = _load_config(args, "train_eval")
    synth = config.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_bags, test_bags, _ = generate(synth)
    write_jsonl(train_bags, out / "train.jsonl")
    write_jsonl(test_bags, out / "test.jsonl")
    print(f"wrote {len(train_bags)} train / {len(test_bags)} test bags to {out}")


def _cmd_eval(args: argparse.Namespace) -> None:
    config = _load_config(args, "train_eval")
    config.dataset = args.data
    params = ModelParams.load(args.params)
    train_bags, test_bags, gt = load_dataset(config)
    corloc_report, ap_report, _ = evaluate_model(params, train_bags, test_bags, gt)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corloc_per_class.csv").write_text(corloc_report.to_csv_text())
    (out / "ap_per_class.csv").write_text(ap_report.to_csv_text())
    print(f"corloc={corloc_report.mean:.4f} map={ap_report.mean:.4f}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            _cmd_gen_data(args)
        elif args.command == "train":
            report = run_train_eval(_load_config(args, "train_eval"))
            print(f"corloc={report.corloc_mean:.4f} map={report.map_mean:.4f}")
        elif args.command == "eval":
            _cmd_eval(args)
        elif args.command == "instability":
            report = run_instability(_load_config(args, "instability"))
            print(f"midr={report.midr:.4f} spearman={report.spearman_idr_corloc:.4f}")
        elif args.command == "fusion-curve":
            report = run_fusion_curve(_load_config(args, "fusion_curve"))
            first, last = report.points[0], report.points[-1]
            print(f"corloc k={first.k}: {first.corloc:.4f} -> k={last.k}: {last.corloc:.4f}")
        elif args.command == "ablate":
            run_ablation(_load_config(args, "ablation"))
            print("ablation grid written")
        else:  # pragma: no cover - argparse enforces the choices
            raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
