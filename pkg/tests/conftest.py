import numpy as np
import pytest

from moefold.model import ModelConfig, init_dense
from moefold.moe import GateConfig

# Keep hypothesis deadlines off: CI boxes with cold numpy caches trip the
# default 200ms budget on the first example.
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=50)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """Small enough for exhaustive finite differences."""
    return ModelConfig(vocab=32, hidden=16, layers=2, heads=2, kv_heads=1,
                       ffn_hidden=32, seq_len=16)


@pytest.fixture(scope="session")
def toy_cfg() -> ModelConfig:
    """The default desk-scale config (supports tp=2 sharding tests)."""
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_dense(tiny_cfg):
    return init_dense(tiny_cfg, seed=7)


@pytest.fixture(scope="session")
def toy_dense(toy_cfg):
    return init_dense(toy_cfg, seed=7)


@pytest.fixture()
def gate8() -> GateConfig:
    return GateConfig(n_experts=8, top_k=2)


def random_tokens(seed: int, n: int, vocab: int) -> np.ndarray:
    from moefold.rng import Rng
    return Rng(seed, stream=90).integers(0, vocab, n)
