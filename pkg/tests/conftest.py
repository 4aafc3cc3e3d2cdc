import json

import numpy as np
import pytest

from src.models import ApConfig, LossModel, McsTable, SimConfig, TimingParams, UserProfile


def make_config(users, **overrides) -> SimConfig:
    """SimConfig from a list of user dicts plus top-level overrides"""
    data = {"ap": {}, "users": users}
    data.update(overrides)
    return SimConfig.model_validate(data)


@pytest.fixture
def config_factory():
    return make_config


@pytest.fixture
def rng():
    """Seeded generator for tests that draw randomness"""
    return np.random.default_rng(1234)


@pytest.fixture
def ap():
    """Default 4-antenna, 20 MHz access point"""
    return ApConfig()


@pytest.fixture
def mcs_table():
    return McsTable()


@pytest.fixture
def loss():
    return LossModel()


@pytest.fixture
def timing():
    return TimingParams()


@pytest.fixture
def static_users():
    """Three static one-stream users at 35 dB"""
    return [UserProfile(id=i, base_snr_db=35.0) for i in range(3)]


@pytest.fixture
def three_static_config():
    """The 3-static-user scenario with ABR and a short run"""
    return make_config(
        [{"id": i, "base_snr_db": 35.0} for i in range(3)],
        duration_epochs=20,
        policy="oracle",
    )


@pytest.fixture
def mobile_config():
    """User 0 moves at 1 m/s, users 1 and 2 are static"""
    return make_config(
        [
            {"id": 0, "base_snr_db": 35.0, "speed_mps": 1.0},
            {"id": 1, "base_snr_db": 35.0},
            {"id": 2, "base_snr_db": 35.0},
        ],
        duration_epochs=30,
        policy="oracle",
    )


@pytest.fixture
def minimal_config_text():
    """Smallest valid scenario: an AP and one user"""
    return json.dumps({"ap": {}, "users": [{"id": 0, "base_snr_db": 30}]})


@pytest.fixture
def scenario_file(tmp_path):
    """Writes a scenario dict to disk and returns its path"""

    def write(document, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return write
