"""Tests for synthdata.py"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from backbone import Modality
from errors import ConfigError
from synthdata import SynthConfig, generate, holdout, load_dataset, save_dataset, split

SMALL = SynthConfig(identity_count=6, samples_per_identity=3, seed=5)


class TestGenerate:
    """Tests for the synthetic dataset generator."""

    def test_sizes_and_labels(self):
        """2 * N * S samples, labels 1..N, both modalities per identity."""
        index, dataset = generate(SMALL)

        assert len(dataset) == 2 * 6 * 3
        assert dataset.images.shape == (36, 3, 16, 8)
        assert sorted(set(dataset.labels.tolist())) == list(range(1, 7))
        assert index.identity_count == 6
        for label in index.identities:
            assert len(index.samples(label, Modality.RGB)) == 3
            assert len(index.samples(label, Modality.IR)) == 3

    def test_bit_identical_for_same_config(self):
        """The same config renders the same arrays."""
        _, a = generate(SMALL)
        _, b = generate(SMALL)

        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.occluded, b.occluded)

    def test_seed_changes_data(self):
        """A different seed renders different images."""
        _, a = generate(SMALL)
        _, b = generate(replace(SMALL, seed=6))

        assert not np.array_equal(a.images, b.images)

    def test_noise_free_zero_gap_modalities_agree(self):
        """With no noise, occlusion or gap, RGB and IR images coincide."""
        config = replace(SMALL, noise_std=0.0, occlusion_prob=0.0, modality_gap=0.0)
        _, dataset = generate(config)

        rgb = dataset.images[dataset.modalities == "rgb"]
        ir = dataset.images[dataset.modalities == "ir"]
        assert np.allclose(rgb, ir)

    def test_occlusion_zeroes_bottom_rows(self):
        """Occluded samples have their bottom half zeroed."""
        config = replace(SMALL, occlusion_prob=1.0, occlusion_fraction=0.5)
        _, dataset = generate(config)

        assert dataset.occluded.all()
        assert np.all(dataset.images[:, :, 8:, :] == 0.0)
        assert np.any(dataset.images[:, :, :8, :] != 0.0)

    def test_sample_view(self):
        """sample() exposes one record."""
        _, dataset = generate(SMALL)

        sample = dataset.sample(4)

        assert sample.label == 1
        assert sample.modality is Modality.IR
        assert sample.image.shape == (3, 16, 8)

    def test_invalid_config(self):
        """Bands must divide the image height; probabilities lie in [0, 1]."""
        with pytest.raises(ConfigError):
            generate(replace(SMALL, band_count=5))
        with pytest.raises(ConfigError):
            generate(replace(SMALL, occlusion_prob=1.5))


class TestSplit:
    """Tests for identity-disjoint splitting."""

    def test_identity_disjoint(self):
        """No test identity appears in training."""
        _, dataset = generate(SMALL)

        train, test = split(dataset, 0.5, seed=0)

        train_ids = set(train.original_ids.values())
        assert len(train_ids) == 3 and len(test.identities) == 3
        assert train_ids.isdisjoint(test.identities)
        assert set(dataset.labels[test.query_ids]) == set(test.identities)

    def test_direction(self):
        """ir_to_rgb queries IR against an RGB gallery, and the reverse."""
        _, dataset = generate(SMALL)

        _, forward = split(dataset, 0.5, seed=0, direction="ir_to_rgb")
        _, backward = split(dataset, 0.5, seed=0, direction="rgb_to_ir")

        assert set(dataset.modalities[forward.query_ids]) == {"ir"}
        assert set(dataset.modalities[forward.gallery_ids]) == {"rgb"}
        assert np.array_equal(forward.query_ids, backward.gallery_ids)

    def test_holdout_too_small(self):
        """Each side keeps at least two identities."""
        _, dataset = generate(SMALL)

        with pytest.raises(ConfigError):
            holdout(dataset, [1, 2, 3], 2, seed=0)

    def test_bad_fraction(self):
        """The train fraction lies strictly between 0 and 1."""
        _, dataset = generate(SMALL)

        with pytest.raises(ConfigError):
            split(dataset, 1.0, seed=0)


class TestDatasetFile:
    """Tests for the dataset file format."""

    def test_save_load(self, tmp_path: Path):
        """Arrays and config survive a save/load."""
        _, dataset = generate(SMALL)
        path = tmp_path / "data" / "dataset.npz"

        save_dataset(path, dataset)
        loaded = load_dataset(path)

        assert loaded.config == SMALL
        assert np.array_equal(loaded.images, dataset.images)
        assert np.array_equal(loaded.modalities, dataset.modalities)

    def test_wrong_format_tag(self, tmp_path: Path):
        """Files without the dataset tag are rejected."""
        path = tmp_path / "other.npz"
        np.savez(path, header=np.array('{"format": "something-else"}'))

        with pytest.raises(ConfigError):
            load_dataset(path)
