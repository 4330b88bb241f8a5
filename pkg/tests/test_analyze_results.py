"""Tests for analyze_results.py"""

import json
import math
from pathlib import Path

import pytest

from analyze_results import ResultsAnalyzer, analyze, welch


def _write_trials(directory: Path, trials: list[dict]) -> None:
    for trial in trials:
        slug = trial["setting"].replace("+", "-")
        (directory / f"trial_{trial['axis']}_{slug}_seed{trial['seed']}.json").write_text(json.dumps(trial))


@pytest.fixture
def loaded(tmp_path: Path, sample_trials: list[dict]) -> ResultsAnalyzer:
    _write_trials(tmp_path, sample_trials)
    analyzer = ResultsAnalyzer(tmp_path)
    analyzer.load_results()
    return analyzer


class TestResultsAnalyzer:
    """Tests for ResultsAnalyzer class."""

    def test_init(self, tmp_path: Path):
        """Test analyzer initialization."""
        analyzer = ResultsAnalyzer(tmp_path)

        assert analyzer.results_dir == tmp_path
        assert analyzer.results == []

    def test_load_results_success(self, loaded: ResultsAnalyzer):
        """Test loading trial files."""
        assert len(loaded.results) == 6

    def test_load_results_no_files(self, tmp_path: Path):
        """Test loading when no trial files exist."""
        analyzer = ResultsAnalyzer(tmp_path)

        assert analyzer.load_results() is False
        assert analyzer.results == []

    def test_group_by_setting(self, loaded: ResultsAnalyzer):
        """Test grouping results by setting."""
        grouped = loaded.group_by_setting()

        assert set(grouped) == {"B", "B+DF2+AM"}
        assert len(grouped["B"]) == 3

    def test_calculate_summary(self, loaded: ResultsAnalyzer):
        """Test summary calculation."""
        summary = loaded.calculate_summary()

        assert summary["B"]["count"] == 3
        assert summary["B"]["seeds"] == [0, 1, 2]
        assert summary["B"]["mAP_mean"] == pytest.approx(0.40)
        assert summary["B+DF2+AM"]["mAP_mean"] == pytest.approx(0.476667, abs=1e-6)
        assert summary["B"]["rank1_mean"] == pytest.approx(0.45)

    def test_welch_t_test(self, loaded: ResultsAnalyzer):
        """Test Welch's t-test between settings."""
        result = loaded.welch_t_test("B", "B+DF2+AM")

        assert result is not None
        assert result["n1"] == result["n2"] == 3
        assert result["diff"] == pytest.approx(0.076667, abs=1e-6)
        assert result["t_stat"] < 0
        assert result["significant"] is True

    def test_welch_on_value_lists(self):
        """Test the unrounded statistic on two shifted samples."""
        result = welch([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])

        assert result["t_stat"] == pytest.approx(-1 / math.sqrt(2 / 3))
        assert result["df"] == pytest.approx(4.0)
        assert result["cohens_d"] == pytest.approx(1.0)
        assert welch([1.0, 1.0], [1.0, 1.0]) is None
        assert welch([1.0], [1.0, 2.0]) is None

    def test_welch_t_test_insufficient_data(self, tmp_path: Path, sample_trials: list[dict]):
        """Test t-test with a single seed per setting."""
        _write_trials(tmp_path, [t for t in sample_trials if t["seed"] == 0])
        analyzer = ResultsAnalyzer(tmp_path)
        analyzer.load_results()

        assert analyzer.welch_t_test("B", "B+DF2+AM") is None

    def test_welch_t_test_unknown_setting(self, loaded: ResultsAnalyzer):
        """Test t-test against a setting that was never run."""
        assert loaded.welch_t_test("B", "B+AM") is None

    def test_ordering_holds(self, loaded: ResultsAnalyzer):
        """The full model beats the baseline on every seed, not the reverse."""
        forward = loaded.ordering_holds("B+DF2+AM", "B")
        backward = loaded.ordering_holds("B", "B+DF2+AM")

        assert forward == {"seeds": [0, 1, 2], "passed": [0, 1, 2], "majority": True}
        assert backward["passed"] == [] and backward["majority"] is False

    def test_generate_report(self, loaded: ResultsAnalyzer):
        """Test report generation."""
        report = loaded.generate_report()

        assert "アブレーション実験" in report
        assert "axis: modules" in report
        assert "B vs B+DF2+AM" in report
        assert "Welch's t=" in report


class TestAnalyze:
    """Tests for the analyze() entry point."""

    def test_writes_report_and_summary(self, tmp_path: Path, sample_trials: list[dict]):
        """Report and summary land next to the trial files."""
        _write_trials(tmp_path, sample_trials)

        report_file = analyze(tmp_path)

        assert report_file == tmp_path / "analysis_report.txt"
        summary = json.loads((tmp_path / "analysis_summary.json").read_text())
        assert summary["B"]["count"] == 3

    def test_empty_directory(self, tmp_path: Path):
        """Nothing to analyze returns None."""
        assert analyze(tmp_path) is None
