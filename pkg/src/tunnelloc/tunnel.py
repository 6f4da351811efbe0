"""Parametric tunnel, facility layout and the two localization maps.

The tunnel is a half-ellipse cross-section (half-width ``a`` at road level,
height ``b``) swept along a centerline. The centerline is straight before
the entrance (s < 0) and a constant-curvature arc from the entrance on.
Positions along the tunnel are expressed in the curvilinear frame
``(s, u, z)``: arc length, lateral offset (right positive) and height above
the road.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose2D, wrap_angle

PAINT_HALF_WIDTH = 0.075


class FacilityKind(str, enum.Enum):
    LAMP = "Lamp"
    EXIT_LIGHT = "ExitLight"
    EXIT_SIGN = "ExitSign"
    LCS = "LCS"
    JET_FAN = "JetFan"
    TUNNEL_LIGHT = "TunnelLight"

    @property
    def usable(self) -> bool:
        return self in USABLE_KINDS


USABLE_KINDS = frozenset(
    {FacilityKind.LAMP, FacilityKind.EXIT_LIGHT, FacilityKind.EXIT_SIGN, FacilityKind.LCS}
)


class WallSide(str, enum.Enum):
    LEFT = "LeftWall"
    RIGHT = "RightWall"
    CEILING = "Ceiling"


EXPECTED_SIDE = {
    FacilityKind.LAMP: WallSide.RIGHT,
    FacilityKind.EXIT_LIGHT: WallSide.LEFT,
    FacilityKind.EXIT_SIGN: WallSide.CEILING,
    FacilityKind.LCS: WallSide.CEILING,
    FacilityKind.JET_FAN: WallSide.CEILING,
    FacilityKind.TUNNEL_LIGHT: WallSide.CEILING,
}


@dataclass(frozen=True)
class FacilityRule:
    """Installation rule for one facility kind.

    ``size`` is (W, L, H) in millimetres. L is measured along the direction
    the facility faces: across the tunnel for wall-mounted kinds, along the
    tunnel for ceiling-mounted ones. ``offset`` is the station of the first
    unit, ``standoff`` the gap between the wall and a wall-mounted unit's
    back face, and ``lateral`` the ceiling position (ignored for LCS, which
    sits above every lane centre).
    """

    kind: FacilityKind
    interval: float
    height: float
    size: tuple[float, float, float]
    wall_side: WallSide
    offset: float = 0.0
    standoff: float = 0.0
    lateral: float | None = None

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("facility interval must be positive")
        if min(self.size) <= 0:
            raise ValueError("facility size components must be positive")
        if EXPECTED_SIDE[self.kind] is not self.wall_side:
            raise ValueError(f"{self.kind.value} must be mounted on {EXPECTED_SIDE[self.kind].value}")

    @property
    def extents(self) -> np.ndarray:
        """Box extents (across, along, height) in metres."""
        w, l, h = (v / 1000.0 for v in self.size)
        if self.wall_side is WallSide.CEILING:
            return np.array([w, l, h])
        return np.array([l, w, h])


def default_layout() -> list[FacilityRule]:
    K, S = FacilityKind, WallSide
    return [
        FacilityRule(K.LAMP, 50.0, 2.75, (200, 220, 420), S.RIGHT, offset=10.0, standoff=0.20),
        FacilityRule(K.EXIT_LIGHT, 50.0, 1.75, (1200, 30, 730), S.LEFT, offset=35.0, standoff=0.10),
        FacilityRule(K.EXIT_SIGN, 250.0, 5.25, (1310, 130, 610), S.CEILING, offset=125.0),
        FacilityRule(K.LCS, 500.0, 5.25, (800, 250, 800), S.CEILING, offset=20.0),
        FacilityRule(K.JET_FAN, 175.0, 5.5, (1200, 4900, 1200), S.CEILING, offset=87.5, lateral=1.8),
        FacilityRule(K.TUNNEL_LIGHT, 7.5, 6.25, (1400, 400, 150), S.CEILING, offset=3.75, lateral=1.8),
    ]


@dataclass(frozen=True)
class Centerline:
    """Straight approach for s < 0, constant-curvature arc (``curvature``, 1/m, left positive) after."""

    entry: Pose2D
    curvature: float = 0.0

    def heading(self, s):
        s = np.asarray(s, dtype=float)
        return self.entry.psi + self.curvature * np.maximum(s, 0.0)

    def point(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        p0 = self.entry.xy
        t0 = self.entry.forward()
        k = self.curvature
        out = p0 + s[..., None] * t0
        if k != 0.0:
            pos = s > 0
            sp = s[pos]
            psi0 = self.entry.psi
            ang = psi0 + k * sp
            x = p0[0] + (np.sin(ang) - math.sin(psi0)) / k
            y = p0[1] - (np.cos(ang) - math.cos(psi0)) / k
            out[pos] = np.stack([x, y], axis=-1)
        return out

    def to_global(self, s, u) -> np.ndarray:
        """Curvilinear (s, u) to local-plane xy; ``u`` is positive to the right."""
        s = np.asarray(s, dtype=float)
        u = np.asarray(u, dtype=float)
        psi = self.heading(s)
        right = np.stack([np.sin(psi), -np.cos(psi)], axis=-1)
        return self.point(s) + u[..., None] * right

    def project(self, xy) -> tuple[np.ndarray, np.ndarray]:
        """Local-plane points to (s, u)."""
        xy = np.asarray(xy, dtype=float)
        d = xy - self.entry.xy
        t0 = self.entry.forward()
        r0 = self.entry.right()
        s = d @ t0
        u = d @ r0
        k = self.curvature
        if k != 0.0:
            pos = s > 0
            if np.any(pos):
                radius = 1.0 / k
                center = self.entry.xy - radius * r0
                dc = xy[pos] - center
                rho = np.hypot(dc[:, 0], dc[:, 1])
                start = r0 * np.sign(radius)
                ang0 = math.atan2(start[1], start[0])
                ang = wrap_angle(np.arctan2(dc[:, 1], dc[:, 0]) - ang0)
                s[pos] = ang * radius
                u[pos] = (rho - abs(radius)) * np.sign(radius)
        return s, u


@dataclass(frozen=True)
class TunnelSpec:
    a: float = 7.0
    b: float = 6.8
    length: float = 1500.0
    lane_count: int = 3
    lane_width: float = 3.6
    entry_pose: Pose2D = Pose2D(0.0, 0.0, 0.0)
    facility_layout: tuple[FacilityRule, ...] = field(default_factory=lambda: tuple(default_layout()))
    curvature: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("ellipse axes must be positive")
        if not self.a > self.lane_count * self.lane_width / 2:
            raise ValueError("tunnel half-width must exceed the carriageway half-width")
        if not self.b > 4.5:
            raise ValueError("tunnel height must exceed 4.5 m")
        if self.length <= 0:
            raise ValueError("tunnel length must be positive")
        object.__setattr__(self, "facility_layout", tuple(self.facility_layout))

    @cached_property
    def centerline(self) -> Centerline:
        return Centerline(self.entry_pose, self.curvature)

    @property
    def road_half_width(self) -> float:
        return self.lane_count * self.lane_width / 2.0

    def lane_center(self, lane: int) -> float:
        """Lateral offset of a lane centre; lane 1 is leftmost."""
        if not 1 <= lane <= self.lane_count:
            raise ValueError(f"lane {lane} outside 1..{self.lane_count}")
        return -self.road_half_width + (lane - 0.5) * self.lane_width

    def lane_lines(self) -> np.ndarray:
        return -self.road_half_width + self.lane_width * np.arange(self.lane_count + 1)

    def wall_u(self, z):
        """Half-width of the cross-section at height ``z``."""
        z = np.clip(np.asarray(z, dtype=float), 0.0, self.b)
        return self.a * np.sqrt(1.0 - (z / self.b) ** 2)

    def rule(self, kind: FacilityKind) -> FacilityRule:
        for r in self.facility_layout:
            if r.kind is kind:
                return r
        raise KeyError(kind)

    def inside(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return (s >= 0.0) & (s <= self.length)


def ellipse_ring(spec: TunnelSpec, angular_res: float = 5.0) -> np.ndarray:
    """Upper half of the tunnel cross-section, one point per ``angular_res`` degrees.

    Returns an (N, 3) array of (x, 0, z).
    """
    if not 0 < angular_res <= 45:
        raise ValueError("angular_res must lie in (0, 45] degrees")
    a, b = spec.a, spec.b
    if a <= 0 or b <= 0:
        raise ValueError("ellipse axes must be positive")
    n = int(round(180.0 / angular_res))
    theta = np.radians(np.arange(n + 1) * (180.0 / n))
    pts = np.empty((theta.size, 3))
    for i, th in enumerate(theta):
        if abs(math.cos(th)) < 1e-12:
            x = 0.0
        else:
            x = a * b / math.sqrt(b * b + a * a * math.tan(th) ** 2)
            x = math.copysign(x, math.cos(th))
        z = b * math.sqrt(max(0.0, 1.0 - (x / a) ** 2))
        pts[i] = (x, 0.0, z)
    return pts


def virtual_cylinder(
    spec: TunnelSpec, angular_res: float = 5.0, ring_spacing: float = 0.5, span: float = 40.0
) -> np.ndarray:
    """Ellipse rings repeated along the vehicle's forward axis, centred on it."""
    if ring_spacing <= 0 or span < 0:
        raise ValueError("ring_spacing must be positive and span non-negative")
    ring = ellipse_ring(spec, angular_res)
    n_rings = int(math.floor(span / ring_spacing + 1e-9)) + 1
    ys = -0.5 * (n_rings - 1) * ring_spacing + ring_spacing * np.arange(n_rings)
    out = np.tile(ring, (n_rings, 1))
    out[:, 1] = np.repeat(ys, ring.shape[0])
    return out


@dataclass(frozen=True)
class PlacedFacility:
    kind: FacilityKind
    s: float
    u: float
    z: float
    extents: np.ndarray  # across, along, height
    xy: np.ndarray
    heading: float

    @property
    def is_landmark(self) -> bool:
        return self.kind.usable


@dataclass(frozen=True)
class Landmark:
    kind: FacilityKind
    position: np.ndarray
    height: float

    def __post_init__(self):
        if not self.kind.usable:
            raise ValueError(f"{self.kind.value} is not a map landmark kind")


class LandmarkMap:
    def __init__(self, landmarks=()):
        self.landmarks = list(landmarks)
        self.kinds = [lm.kind for lm in self.landmarks]
        self.positions = (
            np.array([lm.position for lm in self.landmarks], dtype=float).reshape(-1, 2)
        )
        self.heights = np.array([lm.height for lm in self.landmarks], dtype=float)
        self._by_kind = {}
        for i, k in enumerate(self.kinds):
            self._by_kind.setdefault(k, []).append(i)

    def __len__(self):
        return len(self.landmarks)

    def indices(self, kind: FacilityKind) -> np.ndarray:
        return np.asarray(self._by_kind.get(kind, []), dtype=int)

    def restricted(self, kinds) -> "LandmarkMap":
        kinds = set(kinds)
        return LandmarkMap(lm for lm in self.landmarks if lm.kind in kinds)


class LaneDistMap:
    """Lane-marking Gaussians: means (N, 2) and covariances (N, 2, 2)."""

    def __init__(self, means, covs):
        self.means = np.asarray(means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(covs, dtype=float).reshape(-1, 2, 2)
        if self.means.shape[0] != self.covs.shape[0]:
            raise ValueError("means and covariances differ in length")

    def __len__(self):
        return self.means.shape[0]

    @cached_property
    def inv_covs(self) -> np.ndarray:
        return np.linalg.inv(self.covs)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.means)


def _placement_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A11]))


def place_facilities(spec: TunnelSpec, seed: int = 0, jitter: float = 0.5) -> list[PlacedFacility]:
    """Lay out every facility rule along the tunnel.

    Units sit at ``offset + k * interval`` (nominal station below the tunnel
    length) plus uniform along-track jitter of at most ``jitter`` metres.
    """
    rng = _placement_rng(seed)
    cl = spec.centerline
    out: list[PlacedFacility] = []
    for rule in spec.facility_layout:
        ext = rule.extents
        stations = np.arange(rule.offset, spec.length, rule.interval)
        for s_nom in stations:
            s = float(np.clip(s_nom + rng.uniform(-jitter, jitter), 0.0, spec.length))
            z = rule.height
            if rule.kind is FacilityKind.LCS:
                us = [spec.lane_center(k) for k in range(1, spec.lane_count + 1)]
            elif rule.wall_side is WallSide.CEILING:
                lateral = rule.lateral
                if lateral is None:
                    # above the leftmost lane divider, next to the evacuation corridor
                    lateral = float(spec.lane_lines()[1]) if spec.lane_count > 1 else 0.0
                us = [lateral]
            else:
                wall = float(spec.wall_u(z + 0.5 * ext[2]))
                u = wall - rule.standoff - 0.5 * ext[0]
                us = [u if rule.wall_side is WallSide.RIGHT else -u]
            for u in us:
                xy = cl.to_global(np.array([s]), np.array([u]))[0]
                out.append(
                    PlacedFacility(rule.kind, s, float(u), float(z), ext, xy, float(cl.heading(s)))
                )
    return out


def _segment_gaussian(pts: np.ndarray, minor_sigma: float) -> tuple[np.ndarray, np.ndarray]:
    mean = pts.mean(axis=0)
    c = np.cov(pts.T, bias=True)
    w, v = np.linalg.eigh(c)
    major = v[:, 1]
    minor = v[:, 0]
    cov = w[1] * np.outer(major, major) + minor_sigma**2 * np.outer(minor, minor)
    return mean, 0.5 * (cov + cov.T)


def build_maps(
    spec: TunnelSpec,
    placement: list[PlacedFacility],
    segment_len: float = 5.0,
    sample_step: float = 0.05,
) -> tuple[LandmarkMap, LaneDistMap]:
    if not placement:
        raise ValueError("placement is empty")
    if not 1.0 <= segment_len <= 10.0:
        raise ValueError("segment_len must lie in [1, 10] m")
    landmarks = LandmarkMap(
        Landmark(f.kind, f.xy.copy(), f.z) for f in placement if f.is_landmark
    )
    cl = spec.centerline
    n_seg = int(math.floor(spec.length / segment_len + 1e-9))
    per_seg = int(round(segment_len / sample_step))
    means, covs = [], []
    for u_line in spec.lane_lines():
        for k in range(n_seg):
            s = k * segment_len + (np.arange(per_seg) + 0.5) * (segment_len / per_seg)
            pts = cl.to_global(s, np.full_like(s, u_line))
            m, c = _segment_gaussian(pts, PAINT_HALF_WIDTH)
            means.append(m)
            covs.append(c)
    return landmarks, LaneDistMap(np.array(means), np.array(covs))
