"""Cross-modality retrieval metrics (CMC rank-k, mAP) and the repeated-gallery protocol."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from diff_core import as_array, l2_normalize, pairwise_euclidean
from errors import ConfigError, ProtocolError
from model import DF2AMModel, Embedding
from synthdata import RetrievalSplit, SynthDataset

logger = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)
REPETITION_COLUMNS = ["repetition"] + [f"rank{k}" for k in RANKS] + ["mAP"]


@dataclass(frozen=True)
class EvalConfig:
    """Test protocol knobs. ``embedding`` picks f~ ("fused") or f^g ("global")."""

    repetitions: int = 10
    gallery_per_id: int = 10
    embedding: Embedding = "fused"
    direction: str = "ir_to_rgb"

    def validate(self) -> None:
        if self.repetitions <= 0 or self.gallery_per_id <= 0:
            raise ConfigError("repetitions and gallery_per_id must be positive")
        if self.embedding not in ("fused", "global"):
            raise ConfigError(f"unknown test embedding '{self.embedding}'")
        if self.direction not in ("ir_to_rgb", "rgb_to_ir"):
            raise ConfigError(f"unknown test direction '{self.direction}'")


@dataclass
class RankingProblem:
    distances: np.ndarray
    query_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.query_labels = np.asarray(self.query_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        expected = (len(self.query_labels), len(self.gallery_labels))
        if self.distances.shape != expected:
            raise ConfigError(f"distance matrix {self.distances.shape} does not match labels {expected}")
        if not np.isfinite(self.distances).all():
            raise ConfigError("distance matrix contains non-finite values")
        present = np.isin(self.query_labels, self.gallery_labels)
        if not present.all():
            query = int(np.flatnonzero(~present)[0])
            raise ProtocolError(
                f"query {query} (identity {self.query_labels[query]}) has no match in the gallery"
            )

    def matches(self) -> np.ndarray:
        """(Q, G) relevance in ranked order; ties keep gallery index order."""
        order = np.argsort(self.distances, axis=1, kind="stable")
        return self.gallery_labels[order] == self.query_labels[:, None]


def cmc_rank_k(problem: RankingProblem, ks: Sequence[int] = RANKS) -> dict[int, float]:
    """Fraction of queries with a true match among the k nearest gallery items."""
    gallery_size = problem.distances.shape[1]
    for k in ks:
        if not 0 < k <= gallery_size:
            raise ConfigError(f"rank {k} outside 1..{gallery_size}")
    first_hit = problem.matches().argmax(axis=1)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def mean_ap(problem: RankingProblem) -> float:
    matches = problem.matches()
    hits = np.cumsum(matches, axis=1)
    positions = np.arange(1, matches.shape[1] + 1)
    precision = hits / positions
    ap = (precision * matches).sum(axis=1) / matches.sum(axis=1)
    return float(np.mean(ap))


def permutation_chance_map(problem: RankingProblem, permutations: int = 200, seed: int = 0) -> float:
    """Mean mAP after shuffling gallery labels: the chance level for this label mix."""
    rng = np.random.Generator(np.random.PCG64(seed))
    values = []
    for _ in range(permutations):
        shuffled = RankingProblem(problem.distances, problem.query_labels, rng.permutation(problem.gallery_labels))
        values.append(mean_ap(shuffled))
    return float(np.mean(values))


def normalized_distances(queries: torch.Tensor, gallery: torch.Tensor) -> np.ndarray:
    """Euclidean distances between L2-normalized embeddings."""
    with torch.no_grad():
        return pairwise_euclidean(l2_normalize(queries), l2_normalize(gallery)).numpy()


@dataclass
class MetricsReport:
    cmc: dict[int, float]
    mAP: float
    repetitions: int
    per_repetition: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[1]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["cmc"] = {f"rank{k}": v for k, v in self.cmc.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        cmc = {int(key.removeprefix("rank")): value for key, value in data["cmc"].items()}
        return cls(cmc, data["mAP"], data["repetitions"], data.get("per_repetition", []), data.get("config", {}))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        return cls.from_dict(json.loads(path.read_text()))

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPETITION_COLUMNS)
            writer.writeheader()
            for row in self.per_repetition:
                writer.writerow({key: repr(row[key]) if isinstance(row[key], float) else row[key] for key in REPETITION_COLUMNS})


def batch_images(dataset: SynthDataset, ids: np.ndarray) -> torch.Tensor:
    """The images of ``ids`` as a float64 tensor; NaN or Inf pixels are refused."""
    return as_array(dataset.images[ids], "images")


def evaluate(
    model: DF2AMModel,
    dataset: SynthDataset,
    split: RetrievalSplit,
    config: EvalConfig,
    seed: int,
    snapshot: Optional[dict] = None,
) -> MetricsReport:
    """Average CMC/mAP over repetitions of random per-identity gallery sampling.

    Repetition r draws its gallery with PCG64(SeedSequence([seed, r])). When
    ``gallery_per_id`` covers every identity's gallery, all repetitions agree.
    Rank k larger than the gallery is reported as rank G (always 1.0).
    """
    config.validate()
    query_emb = model.embed(batch_images(dataset, split.query_ids), split.query_modality, config.embedding)
    gallery_emb = model.embed(batch_images(dataset, split.gallery_ids), split.gallery_modality, config.embedding)
    distances = normalized_distances(query_emb, gallery_emb)
    query_labels = dataset.labels[split.query_ids]
    gallery_labels = dataset.labels[split.gallery_ids]

    rows = []
    for repetition in range(config.repetitions):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, repetition])))
        columns = []
        for identity in split.identities:
            own = np.flatnonzero(gallery_labels == identity)
            if len(own) > config.gallery_per_id:
                own = np.sort(rng.choice(own, size=config.gallery_per_id, replace=False))
            columns.append(own)
        columns = np.concatenate(columns)
        problem = RankingProblem(distances[:, columns], query_labels, gallery_labels[columns])
        cmc = cmc_rank_k(problem, [min(k, len(columns)) for k in RANKS])
        row = {"repetition": repetition}
        row.update({f"rank{k}": cmc[min(k, len(columns))] for k in RANKS})
        row["mAP"] = mean_ap(problem)
        rows.append(row)

    report = MetricsReport(
        cmc={k: float(np.mean([row[f"rank{k}"] for row in rows])) for k in RANKS},
        mAP=float(np.mean([row["mAP"] for row in rows])),
        repetitions=config.repetitions,
        per_repetition=rows,
        config={"eval": asdict(config), "seed": seed, **(snapshot or {})},
    )
    logger.info("evaluation: rank1=%.4f mAP=%.4f over %d repetitions", report.rank1, report.mAP, config.repetitions)
    return report
