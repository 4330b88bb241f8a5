"""Command-line entry point: generate-data, train, evaluate, gradcheck, ablate, export-metrics.

Exit codes: 0 success, 1 configuration error, 2 numerical abort, 3 I/O error.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from analyze_results import analyze
from errors import CheckpointError, ConfigError, DF2AMError, NormalizationError, NumericalError
from evaluation import RankingProblem, batch_images, evaluate, normalized_distances, permutation_chance_map
from losses import GRADCHECK_TOLERANCE, gradient_suite
from model import load_checkpoint
from synthdata import generate, save_dataset
from trainer import AXES, TrainConfig, ablate, checkpoint_mismatches, load_config, prepare_data, train
from validate_outputs import validate_ablation, validate_metrics, validate_runlog

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Config file (or defaults) with the command-line overrides applied."""
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.out is not None:
        config = replace(config, output_dir=str(args.out))
    if args.dataset is not None:
        config = replace(config, dataset_file=str(args.dataset))
    loss = config.loss
    if args.lam is not None:
        loss = replace(loss, lam=args.lam)
    if args.zeta is not None:
        loss = replace(loss, zeta=args.zeta)
    if args.margin is not None:
        loss = replace(loss, margin=args.margin)
    config = replace(config, loss=loss)
    if args.parts is not None:
        config = replace(config, dff=replace(config.dff, parts=args.parts))
    config.validate()
    return config


def banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)
    print()


def cmd_generate_data(args: argparse.Namespace) -> int:
    config = build_config(args)
    data_config = config.data if args.seed is None else replace(config.data, seed=args.seed)
    banner("Synthetic Dataset Generator")
    _, dataset = generate(data_config)
    path = Path(config.output_dir) / "dataset.npz"
    save_dataset(path, dataset)
    print(f"Generated: {path}")
    print(f"  Identities: {data_config.identity_count}")
    print(f"  Samples: {len(dataset):,} ({int(dataset.occluded.sum()):,} occluded)")
    print(f"  Image shape: {data_config.image_shape}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    banner("DF2AM Training")
    result = train(config)
    last = result.run_log.steps[-1]
    print(f"Steps: {len(result.run_log.steps)}")
    print(f"Final L_Final: {last['loss_final']:.6f}")
    if result.run_log.epochs:
        print(f"Validation mAP (last epoch): {result.run_log.epochs[-1]['mAP']:.2%}")
    print(f"Checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = build_config(args)
    out = Path(config.output_dir)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    if not checkpoint.exists():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    data = prepare_data(config)
    model, extra = load_checkpoint(checkpoint, tuple(data.dataset.images.shape[1:]))
    mismatches = checkpoint_mismatches(extra, config)
    if mismatches:
        raise CheckpointError(f"{checkpoint} was trained on a different split: " + "; ".join(mismatches))

    banner("DF2AM Evaluation")
    report = evaluate(model, data.dataset, data.test, config.eval, config.seed, snapshot=extra)
    report.save(out / "metrics.json")
    report.write_csv(out / "metrics_repetitions.csv")

    print(f"Direction: {config.eval.direction}  Embedding: {config.eval.embedding}")
    for k, value in report.cmc.items():
        print(f"  Rank-{k:<3} {value:.2%}")
    print(f"  mAP     {report.mAP:.2%}")
    if args.chance:
        queries = model.embed(batch_images(data.dataset, data.test.query_ids),
                              data.test.query_modality, config.eval.embedding)
        gallery = model.embed(batch_images(data.dataset, data.test.gallery_ids),
                              data.test.gallery_modality, config.eval.embedding)
        problem = RankingProblem(
            normalized_distances(queries, gallery),
            data.dataset.labels[data.test.query_ids],
            data.dataset.labels[data.test.gallery_ids],
        )
        print(f"  chance mAP (label permutation) {permutation_chance_map(problem, seed=config.seed):.2%}")
    print(f"\nMetrics saved to {out / 'metrics.json'}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    banner("Finite-Difference Gradient Check")
    errors = gradient_suite(seed=seed, sample_count=args.samples)
    print(f"{'Loss':<10} {'Worst rel. error':>18} {'Status':>8}")
    print("-" * 40)
    failed = False
    for name, error in errors.items():
        ok = error <= GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{name:<10} {error:>18.3e} {'OK' if ok else 'FAIL':>8}")
    print()
    print(f"Tolerance: {GRADCHECK_TOLERANCE:.0e}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def _split_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_ablate(args: argparse.Namespace) -> int:
    config = build_config(args)
    values = _split_list(args.values)
    seeds = [int(s) for s in _split_list(args.seeds)] if args.seeds else [config.seed]
    if not values:
        raise ConfigError("ablate needs at least one value")
    banner(f"Ablation: {args.axis}")
    rows = ablate(config, args.axis, values, seeds, Path(config.output_dir))
    print(f"{'Value':<12} {'Seeds':>5} {'mAP':>8} {'Rank-1':>8}")
    print("-" * 40)
    for row in rows:
        print(f"{row['value']:<12} {row['seeds']:>5} {row['mAP']:>8.2%} {row['rank1']:>8.2%}")
    print(f"\nTable saved to {Path(config.output_dir) / 'ablation.csv'}")
    return EXIT_OK


def cmd_export_metrics(args: argparse.Namespace) -> int:
    """Validate the artifacts under the run directory and flatten them into one CSV."""
    config = build_config(args)
    out = Path(config.output_dir)
    banner("Export Metrics")

    checks = {
        "runlog.csv": validate_runlog(out / "runlog.csv", config.loss),
        "metrics.json": validate_metrics(out / "metrics.json"),
        "ablation.csv": validate_ablation(out / "ablation.csv"),
    }
    present = {name: result for name, result in checks.items() if result["exists"]}
    if not present:
        raise FileNotFoundError(f"no run artifacts in {out}")
    for name, result in present.items():
        status = "✓" if result["valid"] else "✗"
        print(f"  {status} {name}")

    row = {"run_dir": str(out), "seed": config.seed}
    if "runlog.csv" in present:
        with open(out / "runlog.csv", newline="") as fh:
            steps = list(csv.DictReader(fh))
        row["steps"] = len(steps)
        row["loss_final_last"] = steps[-1]["loss_final"] if steps else ""
    if "metrics.json" in present:
        metrics = json.loads((out / "metrics.json").read_text())
        row.update(metrics["cmc"])
        row["mAP"] = repr(metrics["mAP"])
    export = out / "metrics_export.csv"
    with open(export, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
    print(f"\nExported to {export}")

    if list(out.glob("trial_*.json")):
        print()
        analyze(out)

    return EXIT_OK if all(result["valid"] for result in present.values()) else EXIT_IO


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-metrics": cmd_export_metrics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dual-level fusion + affinity modeling for cross-modality re-ID")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", type=Path, help="JSON experiment config (configs/*.json)")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--epochs", type=int)
        sub.add_argument("--lambda", dest="lam", type=float, help="weight of L_D")
        sub.add_argument("--zeta", type=float, help="weight of L_A")
        sub.add_argument("--margin", type=float, help="affinity margin m")
        sub.add_argument("--parts", type=int, help="number of PAP parts P")
        sub.add_argument("--out", type=Path, help="output directory")
        sub.add_argument("--dataset", type=Path, help="dataset file from generate-data")
        sub.add_argument("--verbose", action="store_true")
        if name == "evaluate":
            sub.add_argument("--checkpoint", type=Path)
            sub.add_argument("--chance", action="store_true", help="also print the permutation chance mAP")
        if name == "gradcheck":
            sub.add_argument("--samples", type=int, default=100, help="coordinates checked per loss")
        if name == "ablate":
            sub.add_argument("--axis", required=True, choices=AXES)
            sub.add_argument("--values", required=True, help="comma-separated, e.g. 3,4,5 or B,B+DF2,B+DF2+AM")
            sub.add_argument("--seeds", help="comma-separated training seeds")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, NormalizationError) as exc:
        logger.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except DF2AMError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
