"""Validation logic for run artifacts (RunLog CSV, metrics JSON, ablation CSV)."""

import csv
import json
from pathlib import Path
from typing import TypedDict

from losses import LossWeights
from trainer import ABLATION_COLUMNS, RUNLOG_COLUMNS

IDENTITY_TOLERANCE = 1e-10


class RunLogValidation(TypedDict):
    exists: bool
    header_ok: bool
    rows: int
    monotone_steps: bool
    identity_ok: bool          # loss_final == baseline*(b_rgb + b_ir) + lam*d + zeta*a
    max_identity_error: float
    valid: bool


class MetricsValidation(TypedDict):
    exists: bool
    has_keys: bool
    in_range: bool
    cmc_monotone: bool         # rank1 <= rank5 <= rank10 <= rank20
    valid: bool


class AblationValidation(TypedDict):
    exists: bool
    header_ok: bool
    rows: int
    in_range: bool
    valid: bool


def validate_runlog(filepath: Path, weights: LossWeights = LossWeights()) -> RunLogValidation:
    """
    Check a RunLog CSV written by training.

    Args:
        filepath: Path to runlog.csv
        weights: The loss weights the run used

    Returns:
        Dictionary with the individual checks and an overall verdict
    """
    if not filepath.exists():
        return {
            "exists": False,
            "header_ok": False,
            "rows": 0,
            "monotone_steps": False,
            "identity_ok": False,
            "max_identity_error": float("inf"),
            "valid": False,
        }

    with open(filepath, newline="") as fh:
        reader = csv.DictReader(fh)
        header_ok = reader.fieldnames == RUNLOG_COLUMNS
        rows = list(reader) if header_ok else []

    steps = [int(row["step"]) for row in rows]
    monotone = all(b > a for a, b in zip(steps, steps[1:]))

    worst = 0.0
    for row in rows:
        expected = (
            weights.baseline * (float(row["loss_b_rgb"]) + float(row["loss_b_ir"]))
            + weights.lam * float(row["loss_d"])
            + weights.zeta * float(row["loss_a"])
        )
        worst = max(worst, abs(float(row["loss_final"]) - expected))
    identity_ok = worst <= IDENTITY_TOLERANCE

    return {
        "exists": True,
        "header_ok": header_ok,
        "rows": len(rows),
        "monotone_steps": monotone,
        "identity_ok": identity_ok,
        "max_identity_error": worst,
        "valid": header_ok and bool(rows) and monotone and identity_ok,
    }


def validate_metrics(filepath: Path) -> MetricsValidation:
    """Check a MetricsReport JSON: required keys, values in [0, 1], monotone CMC."""
    if not filepath.exists():
        return {"exists": False, "has_keys": False, "in_range": False, "cmc_monotone": False, "valid": False}

    data = json.loads(filepath.read_text())
    has_keys = all(key in data for key in ("cmc", "mAP", "repetitions"))
    if not has_keys:
        return {"exists": True, "has_keys": False, "in_range": False, "cmc_monotone": False, "valid": False}

    ranks = sorted(data["cmc"], key=lambda key: int(key.removeprefix("rank")))
    curve = [data["cmc"][key] for key in ranks]
    in_range = all(0.0 <= v <= 1.0 for v in curve + [data["mAP"]])
    monotone = all(b >= a for a, b in zip(curve, curve[1:]))

    return {
        "exists": True,
        "has_keys": True,
        "in_range": in_range,
        "cmc_monotone": monotone,
        "valid": in_range and monotone,
    }


def validate_ablation(filepath: Path) -> AblationValidation:
    """Check an ablation CSV: fixed header, one row per value, metrics in [0, 1]."""
    if not filepath.exists():
        return {"exists": False, "header_ok": False, "rows": 0, "in_range": False, "valid": False}

    with open(filepath, newline="") as fh:
        reader = csv.DictReader(fh)
        header_ok = reader.fieldnames == ABLATION_COLUMNS
        rows = list(reader) if header_ok else []

    in_range = all(0.0 <= float(row[key]) <= 1.0 for row in rows for key in ABLATION_COLUMNS[3:])
    return {
        "exists": True,
        "header_ok": header_ok,
        "rows": len(rows),
        "in_range": in_range,
        "valid": header_ok and bool(rows) and in_range,
    }


if __name__ == "__main__":
    import sys

    run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/default")

    print("RunLog Validation:")
    for key, value in validate_runlog(run_dir / "runlog.csv").items():
        print(f"  {key}: {value}")

    print("\nMetrics Validation:")
    for key, value in validate_metrics(run_dir / "metrics.json").items():
        status = "✓" if value else "✗"
        print(f"  {status} {key}")
