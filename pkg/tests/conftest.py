import math

import numpy as np
import pytest

from tunnelloc.geometry import Pose2D
from tunnelloc.sim import LidarModel, World, raycast_scan
from tunnelloc.tunnel import TunnelSpec


@pytest.fixture(scope="session")
def spec():
    return TunnelSpec()


@pytest.fixture(scope="session")
def world(spec):
    return World.build(spec, seed=1)


@pytest.fixture(scope="session")
def bare_world(spec):
    """Tunnel shell only: no facilities, no traffic."""
    return World(spec, [])


def pose_at(spec, s, u=0.0, dpsi=0.0):
    """Pose at station ``s`` and lateral offset ``u`` (right positive), heading along the axis plus ``dpsi``."""
    cl = spec.centerline
    xy = cl.to_global(np.array([s]), np.array([u]))[0]
    return Pose2D(xy[0], xy[1], float(cl.heading(s)) + dpsi)


def scan_at(world, s, u=0.0, dpsi=0.0, noise=0.01, seed=0):
    model = LidarModel(range_noise_sigma=noise)
    return raycast_scan(pose_at(world.spec, s, u, dpsi), model, world, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def lane2_scan(world, spec):
    """A scan from the centre of lane 2, 300 m into the tunnel."""
    return scan_at(world, 300.0, spec.lane_center(2))


def ellipse_residual(xyz, a, b):
    return np.sqrt(xyz[:, 0] ** 2 / a**2 + xyz[:, 2] ** 2 / b**2) - 1.0


def deg(x):
    return math.radians(x)
