import copy

import numpy as np
import pytest

from srcspace import sim
from srcspace.config import DESK, validate


@pytest.fixture(scope="session")
def template():
    return sim.build_template_anatomy(15.0, 80.0, seed=0)


@pytest.fixture(scope="session")
def subject(template):
    return sim.derive_subject_anatomy(template, 7, 0.1, name="s7")


@pytest.fixture(scope="session")
def sensors():
    return sim.build_sensor_array("T", 64, 110.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(cache_root=None):
    """A scenario small enough for unit tests (seconds, not minutes)."""
    cfg = copy.deepcopy(DESK)
    sc = cfg["scenario"]
    sc.update(voxel_size_mm=20.0, session_s=12.0, sampling_rate_hz=200.0)
    sc["response"]["amplitude"] = 1.0
    sc["datasets"]["A"].update(
        n_sensors=48,
        subjects=["a1", "a2", "a3", "a4"],
        split={"train": ["a1", "a2"], "val": ["a3"], "test": ["a4"]},
    )
    sc["datasets"]["B"].update(
        n_sensors=40,
        subjects=["001", "002", "003"],
        sessions=["ses-1", "ses-2", "ses-3"],
        split={"train": ["ses-1"], "val": ["ses-2"], "test": ["ses-3"]},
    )
    cfg["preprocess"]["resample_hz"] = 100.0
    cfg["assemble"]["stride"] = 4
    cfg["model"].update(target_params=8000, channels=[2, 4])
    cfg["train"].update(max_epochs=2, patience=1, batch_size=32)
    cfg["experiments"]["seeds"] = [0, 1]
    cfg["cache_root"] = None if cache_root is None else str(cache_root)
    return validate(cfg)


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path / "cache")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
