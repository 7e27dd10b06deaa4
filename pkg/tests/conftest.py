import numpy as np
import pytest

from pblsim.geometry import SensorIntrinsics, UnitIntrinsics


def random_two_unit(rng, width=64, height=32) -> SensorIntrinsics:
    """Two stacked units with random fovs, offsets, heights and small diode offsets."""
    split = int(rng.integers(height // 4, 3 * height // 4))
    units = (
        UnitIntrinsics(rng.uniform(0.08, 0.2), rng.uniform(0.0, 0.15), rng.uniform(0.0, 0.3), 0, split),
        UnitIntrinsics(rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.5), rng.uniform(-0.3, 0.0), split, height),
    )
    return SensorIntrinsics(width, height, units, rng.uniform(-1e-3, 1e-3, height))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
