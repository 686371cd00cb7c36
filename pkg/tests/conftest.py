import numpy as np
import pytest
import torch

from psumml.labels import ScenarioSpec
from psumml.synth import PhantomConfig, build_dataset, default_styles, load_dataset

torch.set_num_threads(1)


@pytest.fixture
def scenario1():
    return ScenarioSpec.from_organs([1, 3], [2, 4])


@pytest.fixture
def scenario3():
    # A fully labeled, B labels {2, 4}
    return ScenarioSpec.from_organs([1, 2, 3, 4], [2, 4])


def random_probs(rng, shape, channels, dtype=torch.float64):
    """Random softmax map of shape (N, C, H, W)."""
    logits = torch.from_numpy(rng.normal(size=(shape[0], channels) + tuple(shape[1:])))
    return torch.softmax(logits.to(dtype), dim=1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """20 samples per modality at 32x32, scenario (1)."""
    path = tmp_path_factory.mktemp("tiny_ds")
    sc = ScenarioSpec.from_organs([1, 3], [2, 4])
    build_dataset(sc, PhantomConfig(image_size=32, seed=3), default_styles(), 20, path)
    return load_dataset(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
