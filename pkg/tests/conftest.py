import warnings

import numpy as np
import pytest

from ymir_bench import corpus


@pytest.fixture(autouse=True)
def _quiet_bn_warning():
    # untrained-model forwards are exercised deliberately in several tests
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*batchnorm uses identity statistics.*")
        yield


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two clips per genre, 30 s each; shared across tests that need audio."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = corpus.generate_synthetic_corpus(root, clips_per_class=2, seed=101)
    return manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
