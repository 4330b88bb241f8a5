"""Tests for evaluation.py"""

from pathlib import Path

import numpy as np
import pytest
import torch

from errors import ConfigError, NumericalError, ProtocolError
from evaluation import (
    EvalConfig, MetricsReport, RankingProblem, batch_images, cmc_rank_k, evaluate, mean_ap, permutation_chance_map,
)
from synthdata import SynthConfig, generate, split


def _ranks(distances: np.ndarray) -> np.ndarray:
    """Rank of each gallery item per query; ties go to the lower gallery index."""
    q, g = distances.shape
    ranks = np.zeros((q, g), dtype=int)
    for i in range(q):
        for j in range(g):
            ranks[i, j] = sum(
                1 for other in range(g)
                if distances[i, other] < distances[i, j] or (distances[i, other] == distances[i, j] and other < j)
            )
    return ranks


def _cmc_oracle(problem: RankingProblem, k: int) -> float:
    ranks = _ranks(problem.distances)
    hits = 0
    for i, label in enumerate(problem.query_labels):
        if any(ranks[i, j] < k for j in range(len(problem.gallery_labels)) if problem.gallery_labels[j] == label):
            hits += 1
    return hits / len(problem.query_labels)


def _map_oracle(problem: RankingProblem) -> float:
    ranks = _ranks(problem.distances)
    aps = []
    for i, label in enumerate(problem.query_labels):
        relevant = sorted(ranks[i, j] + 1 for j in range(len(problem.gallery_labels))
                          if problem.gallery_labels[j] == label)
        aps.append(np.mean([(n + 1) / r for n, r in enumerate(relevant)]))
    return float(np.mean(aps))


def _random_problem(rng: np.random.Generator, ties: bool = False) -> RankingProblem:
    identities = int(rng.integers(1, 5))
    gallery_labels = np.concatenate([np.arange(1, identities + 1), rng.integers(1, identities + 1, size=int(rng.integers(0, 6)))])
    gallery_labels = rng.permutation(gallery_labels)
    query_labels = rng.integers(1, identities + 1, size=int(rng.integers(1, 11)))
    shape = (len(query_labels), len(gallery_labels))
    distances = rng.integers(0, 3, size=shape).astype(float) if ties else rng.uniform(0, 2, size=shape)
    return RankingProblem(distances, query_labels, gallery_labels)


class TestMetrics:
    """Tests for CMC and mAP against brute-force definitions."""

    def test_cmc_matches_oracle(self, rng: np.random.Generator):
        """Rank-k accuracy equals counting queries with a hit in the top k."""
        for trial in range(200):
            problem = _random_problem(rng, ties=trial % 2 == 1)
            ks = list(range(1, len(problem.gallery_labels) + 1))

            cmc = cmc_rank_k(problem, ks)

            for k in ks:
                assert cmc[k] == pytest.approx(_cmc_oracle(problem, k), abs=1e-12)

    def test_map_matches_oracle(self, rng: np.random.Generator):
        """mAP equals the mean of per-query average precision."""
        for trial in range(200):
            problem = _random_problem(rng, ties=trial % 2 == 1)

            assert mean_ap(problem) == pytest.approx(_map_oracle(problem), abs=1e-12)

    def test_perfect_ranking(self):
        """Matches ranked first give CMC 1 and mAP 1."""
        problem = RankingProblem(
            np.array([[0.1, 0.9, 0.2], [0.8, 0.1, 0.9]]), np.array([1, 2]), np.array([1, 2, 1])
        )

        assert cmc_rank_k(problem, [1]) == {1: 1.0}
        assert mean_ap(problem) == 1.0

    def test_known_average_precision(self):
        """Relevant items at ranks 2 and 3 give AP (1/2 + 2/3) / 2."""
        problem = RankingProblem(np.array([[0.1, 0.2, 0.3]]), np.array([1]), np.array([2, 1, 1]))

        assert mean_ap(problem) == pytest.approx((1 / 2 + 2 / 3) / 2)
        assert cmc_rank_k(problem, [1, 2]) == {1: 0.0, 2: 1.0}

    def test_cmc_is_monotone(self, rng: np.random.Generator):
        """CMC never decreases with k and reaches 1 at k = G."""
        problem = _random_problem(rng)
        ks = list(range(1, len(problem.gallery_labels) + 1))
        curve = [cmc_rank_k(problem, ks)[k] for k in ks]

        assert curve == sorted(curve)
        assert curve[-1] == 1.0

    def test_query_without_match(self):
        """A query identity missing from the gallery is a protocol error naming the query."""
        with pytest.raises(ProtocolError) as info:
            RankingProblem(np.zeros((2, 2)), np.array([1, 3]), np.array([1, 2]))
        assert "query 1" in str(info.value)

    def test_rank_outside_gallery(self):
        """k must lie in 1..G."""
        problem = RankingProblem(np.zeros((1, 2)), np.array([1]), np.array([1, 2]))

        with pytest.raises(ConfigError):
            cmc_rank_k(problem, [3])

    def test_shape_mismatch(self):
        """Distances must be (Q, G)."""
        with pytest.raises(ConfigError):
            RankingProblem(np.zeros((2, 3)), np.array([1, 2]), np.array([1, 2]))

    def test_permutation_chance(self, rng: np.random.Generator):
        """The chance level is reproducible and below a perfect ranking."""
        labels = np.repeat(np.arange(1, 11), 2)
        problem = RankingProblem(rng.uniform(size=(10, 20)), np.arange(1, 11), labels)

        chance = permutation_chance_map(problem, permutations=50, seed=3)

        assert chance == permutation_chance_map(problem, permutations=50, seed=3)
        assert 0.0 < chance < 0.5


SMALL_DATA = SynthConfig(identity_count=8, samples_per_identity=3, image_shape=(3, 8, 4), seed=1)


class TestEvaluate:
    """Tests for the repeated-gallery protocol."""

    def test_full_gallery_repetitions_agree(self, tiny_model):
        """When every gallery sample is kept, all repetitions are equal."""
        _, dataset = generate(SMALL_DATA)
        _, test = split(dataset, 0.5, seed=0)

        report = evaluate(tiny_model, dataset, test, EvalConfig(repetitions=3, gallery_per_id=10), seed=0)

        assert len(report.per_repetition) == 3
        assert report.per_repetition[0]["mAP"] == report.per_repetition[2]["mAP"]
        assert 0.0 <= report.mAP <= 1.0
        assert report.cmc[20] == 1.0

    def test_sampled_gallery_is_seeded(self, tiny_model):
        """Sampled galleries depend only on (seed, repetition)."""
        _, dataset = generate(SMALL_DATA)
        _, test = split(dataset, 0.5, seed=0)
        config = EvalConfig(repetitions=4, gallery_per_id=1, embedding="global")

        a = evaluate(tiny_model, dataset, test, config, seed=7)
        b = evaluate(tiny_model, dataset, test, config, seed=7)

        assert a.per_repetition == b.per_repetition

    def test_batch_images(self):
        """Selected images arrive as float64 in id order; a NaN pixel is refused."""
        _, dataset = generate(SMALL_DATA)
        ids = np.array([3, 0])

        images = batch_images(dataset, ids)

        assert images.dtype == torch.float64
        assert np.array_equal(images.numpy(), dataset.images[ids])
        dataset.images[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            batch_images(dataset, ids)

    def test_invalid_config(self, tiny_model):
        """Unknown embeddings are rejected."""
        _, dataset = generate(SMALL_DATA)
        _, test = split(dataset, 0.5, seed=0)

        with pytest.raises(ConfigError):
            evaluate(tiny_model, dataset, test, EvalConfig(embedding="concat"), seed=0)

    def test_report_round_trip(self, tmp_path: Path):
        """Reports save to JSON and CSV and load back."""
        report = MetricsReport(
            cmc={1: 0.5, 5: 0.75, 10: 1.0, 20: 1.0}, mAP=0.6, repetitions=1,
            per_repetition=[{"repetition": 0, "rank1": 0.5, "rank5": 0.75, "rank10": 1.0, "rank20": 1.0, "mAP": 0.6}],
        )

        report.save(tmp_path / "metrics.json")
        report.write_csv(tmp_path / "metrics.csv")

        assert MetricsReport.load(tmp_path / "metrics.json") == report
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "repetition,rank1,rank5,rank10,rank20,mAP"
