import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from coalflow.core.gasket import build_gasket
from coalflow.core.geometry import SampledPath, box_tube
from coalflow.core.walk1d import StepLaw, WalkSpec
from coalflow.main import app


@pytest.fixture
def seed():
    """Fixed seed shared by tests that compare runs"""
    return 1234


@pytest.fixture
def unit_tube():
    """[0,1] x [0,1] with full faces"""
    return box_tube((0.0, 0.0), (1.0, 1.0), "unit")


@pytest.fixture
def centred_tube():
    """[-1,1] x [0,1] with full faces"""
    return box_tube((-1.0, 0.0), (1.0, 1.0), "centred")


@pytest.fixture
def lazy_spec():
    return WalkSpec(eta=0.125, step=StepLaw.lazy(), horizon=1.0)


@pytest.fixture
def gasket2():
    return build_gasket(2, 0)


@pytest.fixture
def gasket3_wide():
    return build_gasket(3, 2)


def linear_path(points):
    """Piecewise-linear 1d path through (x, t) points"""
    pts = np.asarray(points, dtype=float)
    return SampledPath(pts[0, 1], pts[:, 1], pts[:, 0])


@pytest.fixture
def make_path():
    return linear_path


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cli_app():
    return app


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to a temporary JSON file and return its path"""
    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path
    return _write


@pytest.fixture
def small_single_config():
    return {
        "schema_version": "1",
        "name": "small",
        "model": {"kind": "walk1d", "eta": 0.25, "horizon": 1.0, "starts": {"kind": "flow"}},
        "tubes": [{"id": "T", "pieces": [{"lo": [0.0, 0.5], "hi": [1.0, 1.0]}]}],
        "study": {"kind": "single"},
        "samples": 40,
        "seed": 7,
    }


@pytest.fixture
def small_killed_config():
    return {
        "schema_version": "1",
        "name": "killed",
        "model": {"kind": "walk1d"},
        "study": {"kind": "killed_tail", "K": 1.0, "delta": 0.5, "n_values": [4, 8]},
        "samples": 30,
        "seed": 11,
    }


@pytest.fixture
def configs_dir():
    """Experiment configs shipped with the repository"""
    return Path(__file__).resolve().parent.parent / "configs"
