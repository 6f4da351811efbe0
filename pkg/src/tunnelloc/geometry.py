"""Planar/3D geometry shared by every stage.

Frame conventions
-----------------
- Local plane: x east, y north (meters). Heading ``psi`` is measured CCW
  from +x, so a vehicle with ``psi = 0`` drives east.
- Vehicle frame: x right, y forward, z up. Scan heights are measured from
  the road surface, which puts the tunnel ellipse centre at z = 0.

A vehicle-frame vector ``[lateral, longitudinal]`` maps to the local plane by
``rotate2(v, psi - pi/2)``; :func:`vehicle_to_global` and
:func:`global_to_vehicle` wrap that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EARTH_RADIUS = 6378137.0


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    w = np.mod(a, 2.0 * np.pi)
    w = np.where(w > np.pi, w - 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rotation2(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def rotate2(v, psi: float) -> np.ndarray:
    """CCW rotation of a 2-vector (or an (N, 2) array of row vectors)."""
    v = np.asarray(v, dtype=float)
    c, s = math.cos(psi), math.sin(psi)
    x, y = v[..., 0], v[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def vehicle_to_global(v, psi: float) -> np.ndarray:
    """Rotate vehicle-frame ``[lateral, longitudinal]`` vectors into the local plane."""
    return rotate2(v, psi - 0.5 * np.pi)


def global_to_vehicle(v, psi: float) -> np.ndarray:
    """Inverse of :func:`vehicle_to_global` (the R^-1 used in entry compensation)."""
    return rotate2(v, 0.5 * np.pi - psi)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.psi), math.sin(self.psi)])

    def right(self) -> np.ndarray:
        return np.array([math.sin(self.psi), -math.cos(self.psi)])

    def to_global(self, pts) -> np.ndarray:
        """Vehicle-frame (N, 2) lateral/longitudinal points to local-plane positions."""
        return vehicle_to_global(pts, self.psi) + self.xy

    def to_vehicle(self, pts) -> np.ndarray:
        return global_to_vehicle(np.asarray(pts, dtype=float) - self.xy, self.psi)


class Point3(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class GeoOrigin:
    lat0: float
    lon0: float

    def __post_init__(self):
        if not abs(self.lat0) < 90.0:
            raise ValueError(f"origin latitude out of range: {self.lat0}")


def geo_to_local(lat, lon, origin: GeoOrigin) -> np.ndarray:
    """Equirectangular projection about ``origin``; valid for a few km."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.abs(lat) >= 90.0):
        raise ValueError("latitude must satisfy |lat| < 90")
    k = EARTH_RADIUS * np.pi / 180.0
    east = (lon - origin.lon0) * math.cos(math.radians(origin.lat0)) * k
    north = (lat - origin.lat0) * k
    return np.stack([east, north], axis=-1)


def local_to_geo(p, origin: GeoOrigin) -> np.ndarray:
    """Inverse of :func:`geo_to_local`; returns ``[..., (lat, lon)]``."""
    p = np.asarray(p, dtype=float)
    k = EARTH_RADIUS * np.pi / 180.0
    lat = origin.lat0 + p[..., 1] / k
    lon = origin.lon0 + p[..., 0] / (k * math.cos(math.radians(origin.lat0)))
    return np.stack([lat, lon], axis=-1)


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
