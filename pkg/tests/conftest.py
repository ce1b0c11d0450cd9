import numpy as np
import pytest

from constlab.data import SyntheticLanguageSpec, generate_corpus
from constlab.nn import ConstModel, ModelConfig


TINY_MODEL = dict(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_dim=32, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def lang_spec():
    return SyntheticLanguageSpec()


@pytest.fixture(scope="session")
def small_corpus(lang_spec):
    return generate_corpus(lang_spec, 60, seed=0)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_model(tiny_config):
    return ConstModel(tiny_config, seed=0)
