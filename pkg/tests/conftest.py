"""Shared fixtures: a small trained toy model and its data splits."""

import numpy as np
import pytest

from iorlab.model import TextClassifier, init_params
from iorlab.textcore import Dataset, Example, Vocab, make_toy_corpus, split
from iorlab.train import TrainConfig, train_standard


@pytest.fixture(scope="session")
def toy_splits():
    data = make_toy_corpus(400, seed=0)
    return split(data, (0.7, 0.1, 0.2), seed=0)


@pytest.fixture(scope="session")
def toy_model(toy_splits):
    train, val, _ = toy_splits
    model, _ = train_standard(TrainConfig(lr=0.3, epochs=20, seed=0), train, val)
    return model


@pytest.fixture
def tiny_model():
    vocab = Vocab.from_tokens(["good", "bad", "movie", "fine"])
    params = init_params(len(vocab), d=4, h=5, C=2, seed=3)
    return TextClassifier(params, vocab)


def make_dataset(texts_labels, num_classes=2, tag="train"):
    return Dataset(tuple(Example(t, y, i) for i, (t, y) in enumerate(texts_labels)), num_classes, tag)


def random_params(rng, V=7, d=3, h=4, C=3):
    return init_params(V, d, h, C, seed=int(rng.integers(1 << 30))).with_flat(
        rng.normal(0, 0.7, size=V * d + d * h + h + h * C + C)
    )


# criterion number -> one-line verdict, filled by the acceptance suite
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
