"""Synthetic two-modality person dataset.

Each identity owns a latent z ~ N(0, I_d). An image is split into
``band_count`` horizontal row bands; band b shows its own linear projection
of z, so each "body part" carries separate identity evidence. IR images
pass through a channel mix ``I + gap * E`` plus a bias ``gap * beta``.
Gaussian pixel noise follows, and an occluded sample has its bottom rows
zeroed.

Random streams are PCG64 generators seeded from ``SeedSequence([seed, tag, ...])``:
tag 0 draws the world (projections, mixing, bias), tag 1 the identity
latents, and tag 2 with the sample index draws per-sample noise and
occlusion. Samples therefore render identically in any order or worker split.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from backbone import Modality
from errors import ConfigError
from sampling import DatasetIndex, make_rng

logger = logging.getLogger(__name__)

DATASET_FORMAT = "df2am-synth/1"

Direction = Literal["ir_to_rgb", "rgb_to_ir"]


@dataclass(frozen=True)
class SynthConfig:
    identity_count: int = 50
    samples_per_identity: int = 20
    image_shape: tuple[int, int, int] = (3, 16, 8)
    latent_dim: int = 16
    band_count: int = 4
    modality_gap: float = 1.0
    noise_std: float = 0.3
    occlusion_prob: float = 0.3
    occlusion_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        counts = [self.identity_count, self.samples_per_identity, self.latent_dim, self.band_count, *self.image_shape]
        if any(c <= 0 for c in counts):
            raise ConfigError(f"synthetic dataset counts must be positive, got {counts}")
        if self.image_shape[1] % self.band_count:
            raise ConfigError(f"band_count {self.band_count} does not divide image height {self.image_shape[1]}")
        if self.modality_gap < 0 or self.noise_std < 0:
            raise ConfigError("modality_gap and noise_std must be nonnegative")
        if not 0 <= self.occlusion_prob <= 1:
            raise ConfigError(f"occlusion_prob {self.occlusion_prob} outside [0, 1]")
        if not 0 < self.occlusion_fraction < 1:
            raise ConfigError(f"occlusion_fraction {self.occlusion_fraction} outside (0, 1)")


@dataclass
class SynthSample:
    image: np.ndarray
    label: int
    modality: Modality
    occluded: bool


@dataclass
class SynthDataset:
    """Sample store: arrays indexed by sample id."""

    config: SynthConfig
    images: np.ndarray
    labels: np.ndarray
    modalities: np.ndarray
    occluded: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, sample_id: int) -> SynthSample:
        return SynthSample(
            image=self.images[sample_id],
            label=int(self.labels[sample_id]),
            modality=Modality(str(self.modalities[sample_id])),
            occluded=bool(self.occluded[sample_id]),
        )

    def index(self, identities: Sequence[int] = None) -> DatasetIndex:
        return DatasetIndex.from_samples(self.labels, self.modalities, identities)


@dataclass
class RetrievalSplit:
    """Query/gallery sample ids over held-out identities (original ids)."""

    identities: list[int]
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    direction: Direction

    @property
    def query_modality(self) -> Modality:
        return Modality.IR if self.direction == "ir_to_rgb" else Modality.RGB

    @property
    def gallery_modality(self) -> Modality:
        return Modality.RGB if self.direction == "ir_to_rgb" else Modality.IR


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def generate(config: SynthConfig) -> tuple[DatasetIndex, SynthDataset]:
    """Render the full dataset; identical configs give bit-identical arrays."""
    config.validate()
    channels, height, width = config.image_shape
    band_height = height // config.band_count
    occluded_rows = max(1, int(round(config.occlusion_fraction * height)))

    world = _stream(config.seed, 0)
    projections = world.normal(0.0, 1.0 / np.sqrt(config.latent_dim),
                               size=(config.band_count, channels * width, config.latent_dim))
    mixing = np.eye(channels) + config.modality_gap * world.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, channels))
    bias = config.modality_gap * world.normal(0.0, 1.0, size=(channels, 1, 1))

    latents = _stream(config.seed, 1).normal(size=(config.identity_count, config.latent_dim))

    total = 2 * config.identity_count * config.samples_per_identity
    images = np.empty((total, channels, height, width), dtype=np.float64)
    labels = np.empty(total, dtype=np.int64)
    modalities = np.empty(total, dtype="<U3")
    occluded = np.zeros(total, dtype=bool)

    sample_id = 0
    for identity in range(config.identity_count):
        clean = np.empty((channels, height, width))
        for band in range(config.band_count):
            pattern = (projections[band] @ latents[identity]).reshape(channels, 1, width)
            clean[:, band * band_height:(band + 1) * band_height, :] = pattern
        rendered = {
            Modality.RGB: clean,
            Modality.IR: np.einsum("dc,chw->dhw", mixing, clean) + bias,
        }
        for modality in (Modality.RGB, Modality.IR):
            for _ in range(config.samples_per_identity):
                rng = _stream(config.seed, 2, sample_id)
                image = rendered[modality] + config.noise_std * rng.normal(size=clean.shape)
                if rng.random() < config.occlusion_prob:
                    image[:, height - occluded_rows:, :] = 0.0
                    occluded[sample_id] = True
                images[sample_id] = image
                labels[sample_id] = identity + 1
                modalities[sample_id] = modality.value
                sample_id += 1

    dataset = SynthDataset(config, images, labels, modalities, occluded)
    logger.info("generated %d samples over %d identities (%d occluded)",
                total, config.identity_count, int(occluded.sum()))
    return dataset.index(), dataset


def holdout(
    dataset: SynthDataset,
    identities: Sequence[int],
    count: int,
    seed: int,
    direction: Direction = "ir_to_rgb",
) -> tuple[list[int], RetrievalSplit]:
    """Hold ``count`` of ``identities`` out as a query/gallery split.

    Returns the remaining identities and the held-out split.
    """
    if direction not in ("ir_to_rgb", "rgb_to_ir"):
        raise ConfigError(f"unknown test direction '{direction}'")
    pool = sorted(int(i) for i in identities)
    if count < 2 or len(pool) - count < 2:
        raise ConfigError(
            f"split of {len(pool)} identities into {len(pool) - count}/{count} leaves fewer than 2 on a side"
        )
    order = make_rng(seed).permutation(pool)
    held = sorted(int(i) for i in order[:count])
    rest = sorted(int(i) for i in order[count:])

    in_held = np.isin(dataset.labels, held)
    held_split = RetrievalSplit(held, np.array([], dtype=np.int64), np.array([], dtype=np.int64), direction)
    held_split.query_ids = np.flatnonzero(in_held & (dataset.modalities == held_split.query_modality.value))
    held_split.gallery_ids = np.flatnonzero(in_held & (dataset.modalities == held_split.gallery_modality.value))
    return rest, held_split


def split(
    dataset: SynthDataset,
    train_fraction: float,
    seed: int,
    direction: Direction = "ir_to_rgb",
) -> tuple[DatasetIndex, RetrievalSplit]:
    """Identity-disjoint train/test split; test identities never appear in training."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction {train_fraction} outside (0, 1)")
    identities = sorted(set(int(i) for i in dataset.labels))
    test_count = len(identities) - int(round(train_fraction * len(identities)))
    train_ids, test = holdout(dataset, identities, test_count, seed, direction)
    return dataset.index(train_ids), test


def save_dataset(path: Path, dataset: SynthDataset) -> None:
    header = json.dumps({"format": DATASET_FORMAT, "config": asdict(dataset.config)}, sort_keys=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            header=np.array(header),
            images=dataset.images,
            labels=dataset.labels,
            modalities=dataset.modalities,
            occluded=dataset.occluded,
        )


def load_dataset(path: Path) -> SynthDataset:
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["header"]))
        if header.get("format") != DATASET_FORMAT:
            raise ConfigError(f"{path}: unsupported dataset format {header.get('format')!r}")
        raw = header["config"]
        raw["image_shape"] = tuple(raw["image_shape"])
        return SynthDataset(
            config=SynthConfig(**raw),
            images=archive["images"],
            labels=archive["labels"],
            modalities=archive["modalities"],
            occluded=archive["occluded"],
        )
