import warnings

import numpy as np
import pytest
import torch

from monoindoor import synthetic

torch.set_num_threads(1)
warnings.filterwarnings("ignore", message=".*mkldnn.*")


@pytest.fixture(scope="session")
def box_scene():
    return synthetic.render_scene(synthetic.default_box_room_spec(seed=0))


@pytest.fixture(scope="session")
def small_box_scene():
    spec = synthetic.default_box_room_spec(seed=3, n_triplets=10)
    return synthetic.render_scene(spec)


def to_chw(img):
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
