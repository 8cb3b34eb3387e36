import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mappings():
    from medalseg.textprompts import build_mappings, load_corpus

    return build_mappings(load_corpus())
