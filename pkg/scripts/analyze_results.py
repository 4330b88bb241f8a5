"""Analyze ablation trials and generate reports."""

import argparse
import json
import math
import statistics
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

METRICS = ("mAP", "rank1", "rank5", "rank10", "rank20")


def welch(values1: Sequence[float], values2: Sequence[float]) -> Optional[dict]:
    """Welch's unequal-variance t statistic for two samples.

    None when either sample has fewer than two values or both are constant.
    The p-value is the two-sided normal tail, coarse for a handful of seeds.
    """
    a, b = list(values1), list(values2)
    if len(a) < 2 or len(b) < 2:
        return None
    mean_a, mean_b = statistics.fmean(a), statistics.fmean(b)
    var_a, var_b = statistics.variance(a), statistics.variance(b)
    share_a, share_b = var_a / len(a), var_b / len(b)
    se = math.sqrt(share_a + share_b)
    if se == 0:
        return None
    t_stat = (mean_a - mean_b) / se
    tail = share_a ** 2 / (len(a) - 1) + share_b ** 2 / (len(b) - 1)
    spread = math.sqrt((var_a + var_b) / 2)
    return {
        "mean1": mean_a, "mean2": mean_b,
        "std1": math.sqrt(var_a), "std2": math.sqrt(var_b),
        "n1": len(a), "n2": len(b),
        "t_stat": t_stat,
        "df": (share_a + share_b) ** 2 / tail if tail > 0 else len(a) + len(b) - 2,
        "p_approx": math.erfc(abs(t_stat) / math.sqrt(2)),
        "cohens_d": abs(mean_b - mean_a) / spread if spread > 0 else 0.0,
    }


class ResultsAnalyzer:
    """Aggregates the per-(setting, seed) trial files written by ``ablate``."""

    def __init__(self, results_dir: Path):
        self.results_dir = results_dir
        self.results: list[dict] = []

    def load_results(self) -> bool:
        """Load results from individual trial files (trial_*.json)."""
        trial_files = sorted(self.results_dir.glob("trial_*.json"))
        if not trial_files:
            print(f"No trial files found in {self.results_dir}")
            return False
        for f in trial_files:
            with open(f, "r") as fh:
                self.results.append(json.load(fh))
        print(f"Loaded {len(self.results)} trial results from individual files")
        return True

    def group_by_setting(self) -> dict[str, list[dict]]:
        """Group results by ablation setting (axis value)."""
        grouped = defaultdict(list)
        for result in self.results:
            grouped[result["setting"]].append(result)
        return dict(grouped)

    def settings(self) -> list[str]:
        # Keep the order settings were first seen (trial files sort by axis/value).
        seen: dict[str, None] = {}
        for result in self.results:
            seen.setdefault(result["setting"], None)
        return list(seen)

    def calculate_summary(self) -> dict:
        """Mean/std of every metric per setting (population std, like the seed spread)."""
        summary = {}
        for setting, trials in self.group_by_setting().items():
            n = len(trials)
            entry = {"count": n, "seeds": sorted(t["seed"] for t in trials)}
            for metric in METRICS:
                values = [t[metric] for t in trials if metric in t]
                if not values:
                    continue
                mean = sum(values) / len(values)
                std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values)) if len(values) > 1 else 0.0
                entry[f"{metric}_mean"] = round(mean, 6)
                entry[f"{metric}_std"] = round(std, 6)
            summary[setting] = entry
        return summary

    def welch_t_test(self, setting1: str, setting2: str, metric: str = "mAP") -> Optional[dict]:
        """Compare ``metric`` between two settings; None if either is missing or too small."""
        grouped = self.group_by_setting()
        if setting1 not in grouped or setting2 not in grouped:
            return None
        stats = welch([t[metric] for t in grouped[setting1]], [t[metric] for t in grouped[setting2]])
        if stats is None:
            return None
        return {
            "setting1": setting1,
            "setting2": setting2,
            "metric": metric,
            **{key: round(stats[key], 6) for key in ("mean1", "mean2", "std1", "std2")},
            "n1": stats["n1"],
            "n2": stats["n2"],
            "diff": round(stats["mean2"] - stats["mean1"], 6),
            "t_stat": round(stats["t_stat"], 3),
            "df": round(stats["df"], 1),
            "p_approx": round(stats["p_approx"], 6),
            "cohens_d": round(stats["cohens_d"], 2),
            "significant": stats["p_approx"] < 0.05,
        }

    def ordering_holds(self, higher: str, lower: str, guard: float = 0.005, metric: str = "mAP") -> dict:
        """Per-seed check that ``higher`` scores at least ``lower - guard``.

        ``guard`` is in metric units (0.005 = half an mAP point).
        """
        by_seed = {
            setting: {t["seed"]: t[metric] for t in trials}
            for setting, trials in self.group_by_setting().items()
        }
        seeds = sorted(set(by_seed.get(higher, {})) & set(by_seed.get(lower, {})))
        passed = [s for s in seeds if by_seed[higher][s] >= by_seed[lower][s] - guard]
        return {"seeds": seeds, "passed": passed, "majority": len(passed) * 2 > len(seeds)}

    def generate_report(self) -> str:
        """Generate a text report of the analysis."""
        summary = self.calculate_summary()
        settings = [s for s in self.settings() if s in summary]
        axis = self.results[0].get("axis", "?") if self.results else "?"

        lines = [
            "=" * 70,
            f"アブレーション実験 - 結果レポート (axis: {axis})",
            "=" * 70,
            "",
            "【設定別サマリー】",
            "",
        ]

        lines.append(f"{'Setting':<12} {'N':>4} {'mAP':>8} {'SD':>7} {'Rank-1':>8} {'SD':>7} {'Rank-10':>8}")
        lines.append("-" * 70)
        for setting in settings:
            s = summary[setting]
            lines.append(
                f"{setting:<12} {s['count']:>4} "
                f"{s['mAP_mean']:>8.2%} {s['mAP_std']:>7.2%} "
                f"{s['rank1_mean']:>8.2%} {s['rank1_std']:>7.2%} "
                f"{s.get('rank10_mean', 0):>8.2%}"
            )

        lines.extend(["", "【mAP】", ""])
        for setting in settings:
            rate = summary[setting]["mAP_mean"]
            bar = "█" * int(rate * 20) + "░" * (20 - int(rate * 20))
            lines.append(f"  {setting:<12} {bar} {rate:.1%}")

        lines.extend(["", "【統計的検定】", ""])
        for i in range(len(settings)):
            for j in range(i + 1, len(settings)):
                s1, s2 = settings[i], settings[j]
                lines.append(f"{s1} vs {s2} 比較:")
                t_result = self.welch_t_test(s1, s2)
                if t_result:
                    lines.append(f"  mAP: {s1}={t_result['mean1']:.2%} (SD={t_result['std1']:.2%}), "
                                 f"{s2}={t_result['mean2']:.2%} (SD={t_result['std2']:.2%})")
                    diff_sign = "+" if t_result["diff"] >= 0 else ""
                    lines.append(f"  差分: {diff_sign}{t_result['diff'] * 100:.2f} points")
                    sig_label = "有意" if t_result["significant"] else "有意でない"
                    lines.append(f"  Welch's t={t_result['t_stat']:.3f}, df={t_result['df']:.1f}, "
                                 f"p≈{t_result['p_approx']:.4f} → {sig_label}")
                    lines.append(f"  Cohen's d={t_result['cohens_d']:.2f}")
                else:
                    lines.append("  検定不可（シード数不足または分散ゼロ）")
                lines.append("")

        lines.append("=" * 70)
        return "\n".join(lines)


def analyze(results_dir: Path) -> Optional[Path]:
    """Print the report for ``results_dir`` and save it next to the trials."""
    analyzer = ResultsAnalyzer(results_dir)
    if not analyzer.load_results():
        print("No results to analyze.")
        print("Run an ablation first with: python scripts/df2am.py ablate --axis modules ...")
        return None

    report = analyzer.generate_report()
    print(report)

    report_file = results_dir / "analysis_report.txt"
    with open(report_file, "w") as f:
        f.write(report)
    summary_file = results_dir / "analysis_summary.json"
    summary_file.write_text(json.dumps(analyzer.calculate_summary(), indent=2) + "\n")
    print(f"\nReport saved to {report_file}")
    return report_file


def main():
    parser = argparse.ArgumentParser(description="Summarize ablation trial files")
    parser.add_argument("results_dir", type=Path, nargs="?", default=Path("runs/ablation"))
    args = parser.parse_args()
    analyze(args.results_dir)


if __name__ == "__main__":
    main()
