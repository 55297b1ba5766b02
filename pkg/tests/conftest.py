import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vtwlite import ModelConfig, build_sequence, init_model, load_records
from vtwlite.sequence import empty_vision, make_seeded_vision

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_DIR = Path(__file__).parent / "golden"

REF_CONFIG = ModelConfig(
    num_layers=8, hidden_size=64, num_heads=4, head_dim=16, ffn_factor=4,
    vocab_size=128, vision_embed_dim=32, max_position=512, seed=42,
)


@pytest.fixture(scope="session")
def ref_config():
    return REF_CONFIG


@pytest.fixture(scope="session")
def ref_weights():
    return init_model(REF_CONFIG)


@pytest.fixture(scope="session")
def ref_records():
    return load_records(DATA_DIR / "reference_dataset.jsonl")


@pytest.fixture(scope="session")
def dataset_path():
    return DATA_DIR / "reference_dataset.jsonl"


@pytest.fixture(scope="session")
def config_path():
    return DATA_DIR / "reference_config.json"


def make_prompt(weights, seed, n_sys=6, n_vis=16, n_ins=6):
    """Seeded random prompt in the reference model's vocabulary."""
    rng = np.random.default_rng(seed)
    config = weights.config
    vision = (
        make_seeded_vision(seed + 1, n_vis, config.vision_embed_dim)
        if n_vis else empty_vision(config.vision_embed_dim)
    )
    return build_sequence(
        list(rng.integers(0, config.vocab_size, n_sys)),
        vision,
        list(rng.integers(0, config.vocab_size, n_ins)),
        weights,
    )
