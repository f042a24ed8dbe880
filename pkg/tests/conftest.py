"""Shared fixtures: one compact synthetic world and a few canonical logs.

Simulation is the expensive part of the suite, so everything here is
session-scoped and reused across test modules.
"""

import numpy as np
import pytest

from gridloc.core import VehicleParams
from gridloc.preprocess import filter_packages, synchronize
from gridloc.sim import SimNoise, WorldSpec, generate_world, simulate_log

PARAMS = VehicleParams()
SMALL_SPEC = WorldSpec(scale=0.8, building_count=24, vegetation_count=30)


@pytest.fixture(scope="session")
def vehicle_params():
    return PARAMS


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_SPEC, seed=7)


@pytest.fixture(scope="session")
def clean_log(small_world):
    """Noise-free single lap."""
    return simulate_log(small_world, small_world.route, SimNoise(seed=3), params=PARAMS)


@pytest.fixture(scope="session")
def clean_packages(clean_log):
    records, _ = clean_log
    return filter_packages(synchronize(records))


@pytest.fixture(scope="session")
def biased_log(small_world):
    """Noiseless GPS, odometry corrupted by (1.05, 1.0, 0.01)."""
    noise = SimNoise(odom_v_mult=1.05, odom_phi_mult=1.0, odom_phi_add=0.01, seed=3)
    return simulate_log(small_world, small_world.route, noise, params=PARAMS)


@pytest.fixture(scope="session")
def laser_offset_log(small_world):
    """Per-laser reflectivity offsets are the only corruption."""
    rng = np.random.default_rng(17)
    offsets = tuple(float(v) for v in rng.integers(-8, 9, 32))
    noise = SimNoise(per_laser_reflect_offset=offsets, seed=5)
    return simulate_log(small_world, small_world.route, noise, params=PARAMS)


@pytest.fixture(scope="session")
def drift_loop_log(small_world):
    """1.5 laps with odometry scale drift and noisy GPS (loop-closure fodder)."""
    from gridloc.sim import route_for_laps

    route = route_for_laps(small_world.route, 1.5)
    noise = SimNoise(gps_sigma_xy=1.0, odom_v_mult=1.03, seed=9)
    return simulate_log(small_world, route, noise, params=PARAMS)


def make_scan(t, bearing, rng_m, laser=None, reflect=None):
    """Minimal beam scan for hand-built packages."""
    from gridloc.sim import BeamScan

    n = len(bearing)
    return BeamScan(
        t=t,
        bearing=np.asarray(bearing, dtype=float),
        laser_id=np.asarray(laser if laser is not None else np.full(n, 16), dtype=np.int64),
        range=np.asarray(rng_m, dtype=float),
        reflectivity=np.asarray(reflect if reflect is not None else np.full(n, 100), dtype=np.int64),
        has_cam=np.zeros(n, dtype=bool),
        rgb=np.zeros((n, 3), dtype=np.int64),
        class_label=np.full(n, -1, dtype=np.int64),
    )
