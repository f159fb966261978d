import numpy as np
import pytest

from pmu_purify import nn
from pmu_purify.classifier import classifier_layers
from pmu_purify.data import GenConfig, generate_dataset, normalize, split


@pytest.fixture(scope="session")
def small_ds():
    """Normalized 4-PMU dataset small enough to train on in seconds."""
    ds = generate_dataset(GenConfig(W=30, K=4, samples_per_class=50, seed=3))
    return normalize(split(ds, seed=3))


@pytest.fixture(scope="session")
def small_clf(small_ds):
    from pmu_purify.classifier import ClassifierConfig, train_classifier

    net, _ = train_classifier(small_ds, ClassifierConfig((32, 32), epochs=40, learning_rate=3e-3, seed=0))
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_classifier(W=12, K=2, seed=0):
    return nn.Network(classifier_layers((W, K, 4), (6, 5), 3), (W, K, 4), seed=seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
