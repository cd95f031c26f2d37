import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from nanonas.net import BlockConfig, ModelConfig, build  # noqa: E402
from nanonas.quant import QuantSpec  # noqa: E402
from nanonas.signal_sim import SimConfig, chunk_dataset, simulate_reads  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_reads():
    _, reads = simulate_reads(SimConfig(n_reads=12, read_len=120, seed=3))
    return reads


@pytest.fixture(scope="session")
def small_chunks(small_reads):
    return chunk_dataset(small_reads, 200, 0, (0.75, 0.25), 0)


def tiny_config(quant=QuantSpec(8, 8), skips=True, channels=(8, 12), stride=2) -> ModelConfig:
    return ModelConfig(
        stem=BlockConfig(kernel_size=5, channels_out=8, stride=stride),
        blocks=[BlockConfig(kernel_size=3, channels_out=c, repeats=2, has_skip=skips, quant=quant) for c in channels],
        chunk_len=200,
    )


@pytest.fixture
def tiny_model():
    return build(tiny_config(), seed=0)
