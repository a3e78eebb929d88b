import numpy as np
import pytest
from hypothesis import settings

from jetbundle.corpus import corpus_dir

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    return corpus_dir()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
