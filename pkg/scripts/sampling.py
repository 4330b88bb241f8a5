"""Identity-balanced cross-modality batch sampling.

Every batch holds N* identities with M* RGB and M* IR samples each, ordered
as the RGB block followed by the IR block, identity-grouped inside each
block. All randomness comes from numpy's PCG64 generator.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from backbone import Modality
from errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    """The one rng algorithm used everywhere: PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def worker_seed(seed: int, worker: int) -> int:
    """Seed for prefetch/generation worker ``worker``: seed XOR worker."""
    return seed ^ worker


@dataclass
class DatasetIndex:
    """Sample ids per identity and modality; identities are 1..N.

    ``original_ids`` maps each contiguous label back to the identity id of
    the dataset it was carved from.
    """

    rgb: dict[int, list[int]]
    ir: dict[int, list[int]]
    original_ids: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.original_ids:
            self.original_ids = {label: label for label in self.rgb}
        self.validate()

    @property
    def identity_count(self) -> int:
        return len(self.rgb)

    @property
    def identities(self) -> list[int]:
        return list(range(1, self.identity_count + 1))

    def samples(self, label: int, modality: Modality) -> list[int]:
        return (self.rgb if Modality(modality) is Modality.RGB else self.ir)[label]

    def validate(self) -> None:
        expected = set(range(1, len(self.rgb) + 1))
        if set(self.rgb) != expected or set(self.ir) != expected:
            raise ConfigError("dataset index identities must be contiguous 1..N in both modalities")
        for label in expected:
            if not self.rgb[label] or not self.ir[label]:
                raise ConfigError(
                    f"identity {label} (original {self.original_ids.get(label)}) "
                    "needs at least one sample per modality"
                )

    @classmethod
    def from_samples(
        cls,
        labels: Sequence[int],
        modalities: Sequence[str],
        identities: Optional[Sequence[int]] = None,
    ) -> "DatasetIndex":
        """Index the samples whose identity is in ``identities`` (all by default).

        Identities are relabeled 1..n in ascending order of their original id.
        """
        labels = np.asarray(labels)
        modalities = np.asarray(modalities)
        chosen = sorted(set(int(i) for i in (labels if identities is None else identities)))
        relabel = {original: new for new, original in enumerate(chosen, start=1)}
        rgb: dict[int, list[int]] = {new: [] for new in relabel.values()}
        ir: dict[int, list[int]] = {new: [] for new in relabel.values()}
        for sample_id, (label, modality) in enumerate(zip(labels, modalities)):
            new = relabel.get(int(label))
            if new is None:
                continue
            (rgb if modality == Modality.RGB.value else ir)[new].append(sample_id)
        return cls(rgb=rgb, ir=ir, original_ids={new: original for original, new in relabel.items()})


@dataclass(frozen=True)
class BatchSpec:
    """N* identities per batch, M* samples per identity per modality."""

    identities: int = 8
    samples: int = 4

    @property
    def k(self) -> int:
        return self.identities * self.samples

    @property
    def batch_size(self) -> int:
        return 2 * self.k

    def validate(self) -> None:
        if self.identities < 2 or self.samples < 2:
            raise ConfigError(
                f"batch needs N* >= 2 and M* >= 2, got N*={self.identities}, M*={self.samples}"
            )


@dataclass
class Batch:
    """2K* sample ids: K* RGB then K* IR, with labels and modality tags."""

    sample_ids: np.ndarray
    labels: np.ndarray
    modalities: list[Modality]

    @property
    def k(self) -> int:
        return len(self.sample_ids) // 2


def _draw(pool: list[int], count: int, rng: np.random.Generator) -> list[int]:
    """``count`` uniform draws from ``pool``; with replacement only when the pool is short."""
    picks = rng.choice(len(pool), size=count, replace=len(pool) < count)
    return [pool[int(i)] for i in picks]


def sample_batch(
    index: DatasetIndex,
    spec: BatchSpec,
    rng: np.random.Generator,
    identities: Optional[Sequence[int]] = None,
) -> Batch:
    """Draw one identity-balanced batch.

    ``identities`` fixes the N* identities (used by epoch iteration);
    otherwise they are drawn uniformly without replacement.
    """
    spec.validate()
    if index.identity_count < spec.identities:
        raise SamplingError(
            f"dataset has {index.identity_count} identities, batch needs N*={spec.identities}"
        )
    if identities is None:
        chosen = [int(i) for i in rng.choice(index.identities, size=spec.identities, replace=False)]
    else:
        chosen = [int(i) for i in identities]
        if len(chosen) != spec.identities or len(set(chosen)) != len(chosen):
            raise SamplingError(f"expected {spec.identities} distinct identities, got {chosen}")

    sample_ids: list[int] = []
    labels: list[int] = []
    modalities: list[Modality] = []
    for modality in (Modality.RGB, Modality.IR):
        for label in chosen:
            drawn = _draw(index.samples(label, modality), spec.samples, rng)
            sample_ids += drawn
            labels += [label] * spec.samples
            modalities += [modality] * spec.samples
    return Batch(np.asarray(sample_ids, dtype=np.int64), np.asarray(labels, dtype=np.int64), modalities)


class IdentityBalancedSampler:
    """Epoch iterator: identities shuffled once per epoch, consumed N* at a time.

    The last short chunk is padded with random identities not yet in it.
    """

    def __init__(self, index: DatasetIndex, spec: BatchSpec, seed: int):
        spec.validate()
        if index.identity_count < spec.identities:
            raise SamplingError(
                f"dataset has {index.identity_count} identities, batch needs N*={spec.identities}"
            )
        self.index = index
        self.spec = spec
        self.rng = make_rng(seed)

    def __len__(self) -> int:
        return math.ceil(self.index.identity_count / self.spec.identities)

    def epoch(self) -> Iterator[Batch]:
        order = [int(i) for i in self.rng.permutation(self.index.identities)]
        for start in range(0, len(order), self.spec.identities):
            chunk = order[start:start + self.spec.identities]
            if len(chunk) < self.spec.identities:
                rest = [i for i in self.index.identities if i not in chunk]
                pad = self.rng.choice(rest, size=self.spec.identities - len(chunk), replace=False)
                chunk += [int(i) for i in pad]
                logger.debug("padded last chunk with identities %s", list(pad))
            yield sample_batch(self.index, self.spec, self.rng, identities=chunk)
