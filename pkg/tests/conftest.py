import numpy as np
import pytest

from dtmnav.camera_geom import Pose, relative_motion
from dtmnav.dtm import TerrainGrid
from dtmnav.ins import dcm_from_euler
from dtmnav.pose_solver import pack_params
from dtmnav.sim import TerrainSpec, synth_flow, synth_terrain

NADIR = dcm_from_euler((np.pi, 0.0, 0.0))


def plane_grid(slope_x=0.0, slope_y=0.0, offset=0.0, cell=10.0, extent=(-500.0, 500.0, -500.0, 500.0)):
    x0, x1, y0, y1 = extent
    xs = np.arange(x0, x1 + 0.5 * cell, cell)
    ys = np.arange(y0, y1 + 0.5 * cell, cell)
    X, Y = np.meshgrid(xs, ys)
    return TerrainGrid(x0, y0, cell, offset + slope_x * X + slope_y * Y)


def two_frame_scenario(grid, seed, n, sigma=0.0, alt=100.0, fov=0.5):
    """Random generic two-frame geometry over ``grid`` with exact (or noisy) flow.

    Returns ``(flow, truth_params)``.
    """
    rng = np.random.default_rng(seed)
    p1 = np.array([*rng.uniform(-100, 100, 2), alt])
    R1 = dcm_from_euler(rng.uniform(-0.1, 0.1, 3)) @ NADIR
    heading = rng.uniform(0, 2 * np.pi)
    p2 = p1 + np.array([40 * np.cos(heading), 40 * np.sin(heading), rng.uniform(-2, 2)])
    R2 = dcm_from_euler(rng.uniform(-0.02, 0.02, 3)) @ R1
    pose1, pose2 = Pose(p1, R1), Pose(p2, R2)
    motion = relative_motion(pose1, pose2)
    flow = synth_flow(pose1, motion, grid, n, sigma, rng, fov)
    return flow, pack_params(pose1, motion)


@pytest.fixture(scope="session")
def flat_grid():
    return plane_grid()


@pytest.fixture(scope="session")
def inclined_grid():
    return plane_grid(slope_x=0.1)


@pytest.fixture(scope="session")
def rolling_grid():
    # same relief as the scenario default, smaller footprint
    return synth_terrain(TerrainSpec(kind="rolling", amplitude=20.0, wavelength=100.0,
                                     extent=(-600.0, 600.0, -600.0, 600.0)))


_ACCEPTANCE_LINES = []


def record_acceptance(line: str):
    """Queue a criterion verdict for the terminal summary."""
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
