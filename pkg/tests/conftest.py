import os

import numpy as np
import pytest

from ccpsim.cli import write_init
from ccpsim.config import load_config
from ccpsim.experiment import build_setup

# criterion number -> (name, passed, detail); filled by the acceptance module
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def experiment_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    write_init(str(out))
    return str(out)


@pytest.fixture(scope="session")
def experiment_config(experiment_dir):
    return load_config(os.path.join(experiment_dir, "config.yaml"))


@pytest.fixture(scope="session")
def small_setup(experiment_config):
    """Full 101-member network with a cheaper barrier calibration."""
    cfg = experiment_config.with_overrides(calibration={"paths": 4000, "seed": 3})
    setup, _ = build_setup(cfg)
    return setup


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
