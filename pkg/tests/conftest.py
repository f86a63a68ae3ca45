import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lidog.synth import SceneSpec, SensorSpec, generate_scene, raycast_scan, scan_rng  # noqa: E402

SMALL_SENSOR = SensorSpec(beam_count=16, elevation_min=-25.0, elevation_max=3.0, azimuth_step=4.0)
SMALL_SCENE = SceneSpec(extent=15.0)


def small_scans(n, base=0, sensor=SMALL_SENSOR):
    out = []
    for i in range(n):
        seed = base + i
        scene = generate_scene(SceneSpec(**{**SMALL_SCENE.__dict__, "seed": seed}))
        out.append(raycast_scan(scene, sensor, scan_rng(seed), frame_id=f"{i:06d}"))
    return out


@pytest.fixture(scope="session")
def scans():
    return small_scans(6)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def report(request):
    """Print a ``CRITERION n: PASS|FAIL`` line and repeat it in the terminal summary."""

    def _report(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print("\n" + line)
        request.config.stash[_CRITERIA].append((n, line))

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
