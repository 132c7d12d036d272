import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridrl.grid_model import case_from_dict, load_case  # noqa: E402


def line_case(n_bus=2, r=0.02, x=0.04, load_p=0.0, load_q=0.0, generators=(), s_max=10.0):
    """Path network with base_kv=10, base_mva=100 so that ohms equal p.u."""
    doc = {
        "name": f"line{n_bus}", "base_mva": 100.0, "base_kv": 10.0, "slack_bus": 0,
        "buses": [{"id": i, "load_p_mw": 0.0 if i == 0 else 100.0 * load_p,
                   "load_q_mvar": 0.0 if i == 0 else 100.0 * load_q} for i in range(n_bus)],
        "branches": [{"from": i, "to": i + 1, "r_ohm": r, "x_ohm": x, "s_max_mva": 100.0 * s_max}
                     for i in range(n_bus - 1)],
        "generators": list(generators),
    }
    return case_from_dict(doc)


def thermal_gen(bus, p_min=10.0, p_max=40.0, q=40.0, rated=40.0):
    return {"kind": "thermal", "bus": bus, "p_min": p_min, "p_max": p_max, "q_min": -q, "q_max": q,
            "v_min": 0.95, "v_max": 1.05, "rated_p": rated, "ramp_fraction": 0.25,
            "cost": {"a": 0.0175, "b": 1.75, "c": 0.0}}


@pytest.fixture(scope="session")
def case33():
    return load_case("ieee33")


@pytest.fixture(scope="session")
def case69():
    return load_case("ieee69")


@pytest.fixture(scope="session")
def case118():
    return load_case("ieee118")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
