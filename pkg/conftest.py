import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

from src.diffusion import MultimodalSRModel
from src.synth_data import generate_samples
from src.vq_tokenizer import VqTokenizer


TINY_MODEL = dict(d_model=8, n_latents=4, mmlc_self_blocks=1, denoiser_blocks=1, heads=2,
                  grid=8, resolution=32, scale=4, d_tok=4, seed=0)


@pytest.fixture(scope="session")
def samples():
    return generate_samples(6, seed=3)


@pytest.fixture(scope="session")
def tokenizer():
    return VqTokenizer(codes=8, d_tok=4, grid=8, resolution=32, blocks=0, heads=1, seed=0)


@pytest.fixture
def tiny_model():
    return MultimodalSRModel(**TINY_MODEL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
