import numpy as np
import pytest

from dompat.data import Dataset
from dompat.nn import build_model, reference_spec
from helpers import random_images, tiny_spec


@pytest.fixture
def tiny_model():
    return build_model(tiny_spec(), seed=3)


@pytest.fixture
def small_ref_model():
    return build_model(reference_spec(input_shape=(3, 16, 16), widths=(4, 4, 4), hidden=8), seed=1)


@pytest.fixture
def tiny_data():
    return Dataset(random_images(40, (1, 8, 8)), np.arange(40) % 3, "tiny", 3)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
