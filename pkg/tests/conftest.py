import numpy as np
import pytest

from psirkit.core import uniform_mask
from psirkit.phantom import MotionTrace, default_phantom, simulate_coil_maps, simulate_series
from psirkit.preprocess import CoilSensitivities


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_maps(rng, coils, rows, cols, zero_fraction=0.0):
    """Unit-RSS complex maps; optionally zero out some pixels."""
    m = rng.standard_normal((coils, rows, cols)) + 1j * rng.standard_normal((coils, rows, cols))
    m /= np.sqrt(np.sum(np.abs(m) ** 2, axis=0))
    if zero_fraction:
        m[:, rng.random((rows, cols)) < zero_fraction] = 0
    return CoilSensitivities(m)


@pytest.fixture
def small_series():
    """Noiseless, motionless, fully sampled 48x64 series with 4 coils."""
    spec = default_phantom(48, 64, seed=3)
    maps = simulate_coil_maps(4, 48, 64, seed=4)
    mask = uniform_mask(48, 1, 16)
    return simulate_series(spec, maps, mask, MotionTrace.static(8), None, 4, seed=5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")
