import numpy as np
import pytest

from hifikit import data as D
from hifikit import model as mdl


def random_spd(rng, n, rank=None, jitter=1e-3):
    rank = n if rank is None else rank
    A = rng.standard_normal((n, rank))
    return A @ A.T + jitter * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_mlp():
    """Small trained MLP on a 4-class blob task with its source and data."""
    src = D.blob_source(4, 10, separation=4.0, seed=0)
    train = D.sample(src, 100, seed=1)
    test = D.sample(src, 100, seed=2)
    model = mdl.train(mdl.mlp(10, [24, 16], 4, seed=0), train, mdl.TrainConfig(epochs=15))
    return model, src, train, test


@pytest.fixture(scope="session")
def small_cnn():
    src = D.pattern_source(3, (2, 8, 8), seed=0)
    train = D.sample(src, 40, seed=1)
    test = D.sample(src, 40, seed=2)
    model = mdl.train(mdl.cnn((2, 8, 8), [6, 8], 3, seed=0), train, mdl.TrainConfig(epochs=8))
    return model, src, train, test


@pytest.fixture(scope="session")
def small_ffn():
    src = D.pattern_source(3, (4, 8), seed=0)
    train = D.sample(src, 40, seed=1)
    test = D.sample(src, 40, seed=2)
    model = mdl.train(mdl.ffn_classifier(4, 8, 16, 3, blocks=2, seed=0), train, mdl.TrainConfig(epochs=8))
    return model, src, train, test


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
