"""Pytest configuration and fixtures for scripts tests."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add scripts directory to path
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow ablation tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training benchmarks (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def smoke_config(tmp_path: Path):
    """The smoke config writing into a temporary run directory."""
    from dataclasses import replace

    from trainer import load_config

    config = load_config(CONFIG_DIR / "smoke.json")
    return replace(config, output_dir=str(tmp_path / "run"))


@pytest.fixture
def tiny_model():
    """A small model over 3x8x4 images and 3 identities."""
    from backbone import EncoderConfig
    from dff import DFFConfig
    from model import DF2AMModel

    encoder = EncoderConfig(input_shape=(3, 8, 4), stem_widths=(4,), trunk_widths=(6, 6), identity_count=3)
    return DF2AMModel(encoder, DFFConfig(parts=2), seed=0)


@pytest.fixture
def sample_trials() -> list[dict]:
    """Trial files as written by an ablation over the modules axis."""
    trials = []
    for setting, maps in [("B", [0.40, 0.42, 0.38]), ("B+DF2+AM", [0.47, 0.50, 0.46])]:
        for seed, value in enumerate(maps):
            trials.append({
                "axis": "modules", "setting": setting, "seed": seed, "mAP": value,
                "rank1": value + 0.05, "rank5": value + 0.2, "rank10": value + 0.3, "rank20": 1.0,
            })
    return trials
