"""Shared test fixtures for the bp-int8-encoder scripts."""

import os
import sys

# Add scripts/ to path so the modules import by bare name
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

import common  # noqa: E402,F401  (caps BLAS threads before numpy loads)
import numpy as np  # noqa: E402
import pytest  # noqa: E402
from encoder_model import ModelConfig, PRESETS, init_xavier  # noqa: E402
from signal_data import generate_synthetic, write_container  # noqa: E402

# Small enough for fast tests, still two channels x several patches.
FAST_CONFIG = ModelConfig(patch_len=125, embed_dim=16, num_block_pairs=1, num_heads=2, mlp_ratio=2)


@pytest.fixture
def fast_cfg():
    """Reduced encoder configuration (10 patches per channel, width 16)."""
    return FAST_CONFIG


@pytest.fixture
def tiny_cfg():
    """The default tiny preset (50 patches per channel, width 64)."""
    return PRESETS["tiny"]


@pytest.fixture
def fast_model(fast_cfg):
    """Xavier-initialized reduced encoder."""
    return init_xavier(fast_cfg, seed=0)


@pytest.fixture(scope="session")
def synthetic_ds():
    """40 synthetic segments, seed 3."""
    return generate_synthetic(40, seed=3)


@pytest.fixture
def container_file(tmp_path, synthetic_ds):
    """BPSEG1 file holding the synthetic fixture dataset."""
    path = str(tmp_path / "data.bpseg")
    write_container(synthetic_ds, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
