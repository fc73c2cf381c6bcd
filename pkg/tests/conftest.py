import numpy as np
import pytest

from driftlab.model import ModelConfig, TransformerWeights


TINY = ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=16,
                   max_seq_len=10, seed=3)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_weights():
    return TransformerWeights(TINY)


@pytest.fixture
def tiny_weights64():
    return TransformerWeights(TINY, dtype=np.float64)


def rand_tokens(rng, n, vocab=TINY.vocab_size):
    return rng.integers(0, vocab, size=n)
