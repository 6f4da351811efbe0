"""Synthetic drive through the tunnel: LIDAR scans, dead reckoning and GPS.

The scan model casts one ray per (channel, azimuth) against the analytic
tunnel wall, the road plane, facility boxes and occluding vehicles. Scans
are emitted motion-undistorted unless ``LidarModel.distort`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .geometry import Pose2D, global_to_vehicle, wrap_angle
from .tunnel import PAINT_HALF_WIDTH, FacilityKind, PlacedFacility, TunnelSpec, place_facilities

# Approximate RS-LIDAR-32 channel layout: dense around the horizon, sparse at the edges.
RS32_ELEVATIONS = (
    -25.0, -14.64, -7.91, -5.41, -4.67, -4.33, -4.0, -3.67, -3.33, -3.0, -2.67,
    -2.33, -2.0, -1.67, -1.33, -1.0, -0.67, -0.33, 0.0, 0.33, 0.67, 1.0, 1.33,
    1.67, 2.0, 2.33, 3.0, 3.33, 4.67, 7.0, 10.33, 15.0,
)

INTENSITY = {
    "paint": (200.0, 10.0),
    "asphalt": (20.0, 10.0),
    "wall": (40.0, 10.0),
    "facility": (120.0, 20.0),
    "vehicle": (60.0, 15.0),
}

# indexed by material code: none, asphalt, wall, facility, vehicle, paint
_INTENSITY_TABLE = np.array(
    [(0.0, 0.0)] + [INTENSITY[k] for k in ("asphalt", "wall", "facility", "vehicle", "paint")]
).T

KMH = 1.0 / 3.6
DEG_PER_HOUR = math.pi / 180.0 / 3600.0
MICRO_G = 9.80665e-6


@dataclass(frozen=True)
class LidarModel:
    channels: int = 32
    vfov: tuple[float, float] = (-25.0, 15.0)
    h_res: float = 0.1
    range_max: float = 200.0
    range_noise_sigma: float = 0.01
    rate: float = 10.0
    mount_height: float = 1.9
    elevations: tuple[float, ...] | None = None
    distort: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.range_noise_sigma < 0:
            raise ValueError("range noise must be non-negative")

    @cached_property
    def elevation_deg(self) -> np.ndarray:
        if self.elevations is not None:
            return np.sort(np.asarray(self.elevations, dtype=float))
        if self.channels == 32 and tuple(self.vfov) == (-25.0, 15.0):
            return np.asarray(RS32_ELEVATIONS)
        return np.linspace(self.vfov[0], self.vfov[1], self.channels)

    @cached_property
    def azimuths(self) -> np.ndarray:
        """Azimuth of each column, radians clockwise from the forward axis."""
        n = int(round(360.0 / self.h_res))
        return np.radians(np.arange(n) * (360.0 / n))

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit ray directions in the vehicle frame, shape (channels, columns, 3)."""
        el = np.radians(self.elevation_deg)[:, None]
        az = self.azimuths[None, :]
        ce = np.cos(el)
        return np.stack(
            np.broadcast_arrays(ce * np.sin(az), ce * np.cos(az), np.sin(el)), axis=-1
        )


@dataclass(frozen=True)
class DrModel:
    gyro_bias: float = 10.0 * DEG_PER_HOUR
    gyro_noise: float = math.radians(0.01)  # rad/s/sqrt(Hz)
    accel_bias: float = 15.0 * MICRO_G
    accel_noise: float = 60.0 * MICRO_G  # m/s^2/sqrt(Hz)
    speed_noise: float = 0.02
    rate: float = 40.0

    def __post_init__(self):
        for name in ("gyro_bias", "gyro_noise", "accel_bias", "accel_noise", "speed_noise", "rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def ideal(cls) -> "DrModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GpsModel:
    cep: float = 2.5
    heading_sigma: float = math.radians(0.3)

    @property
    def sigma(self) -> float:
        # CEP -> per-axis sigma for a circular Gaussian
        return self.cep / 1.1774


@dataclass(frozen=True)
class Route:
    lane: int = 2
    speed: float = 100.0 * KMH
    start_s: float = -100.0
    end_s: float | None = None
    wander_amplitude: float = 0.1
    wander_wavelength: float = 300.0
    lookahead: float = 12.0

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")


@dataclass
class Scan:
    """One LIDAR revolution in the vehicle frame (z above the road)."""

    xyz: np.ndarray
    intensity: np.ndarray
    t: float = 0.0

    def __len__(self):
        return self.xyz.shape[0]

    def subset(self, mask) -> "Scan":
        return Scan(self.xyz[mask], self.intensity[mask], self.t)

    @classmethod
    def empty(cls, t: float = 0.0) -> "Scan":
        return cls(np.zeros((0, 3)), np.zeros(0), t)


@dataclass
class SimFrame:
    t: float
    truth: Pose2D
    scan: Scan
    dr_speed: float
    dr_yaw_rate: float
    gps: np.ndarray | None = None
    gps_heading: float | None = None
    truth_s: float = 0.0
    in_tunnel: bool = False

    @property
    def gps_valid(self) -> bool:
        return self.gps is not None


@dataclass
class Box:
    center: np.ndarray  # global x, y, z
    yaw: float
    half: np.ndarray  # half extents (across, along, height)
    material: str = "facility"


@dataclass
class Occluder:
    lane: int
    s0: float
    speed: float


@dataclass
class World:
    spec: TunnelSpec
    placement: list[PlacedFacility]
    occluders: list[Occluder] = field(default_factory=list)

    @classmethod
    def build(cls, spec: TunnelSpec, seed: int = 0) -> "World":
        return cls(spec, place_facilities(spec, seed))

    @cached_property
    def facility_boxes(self) -> list[Box]:
        return [
            Box(np.array([f.xy[0], f.xy[1], f.z]), f.heading, 0.5 * np.asarray(f.extents))
            for f in self.placement
        ]

    @cached_property
    def _facility_xy(self) -> np.ndarray:
        return np.array([b.center[:2] for b in self.facility_boxes]).reshape(-1, 2)

    def boxes_near(self, xy: np.ndarray, radius: float, t: float) -> list[Box]:
        d = np.hypot(*(self._facility_xy - xy).T) if len(self.facility_boxes) else np.zeros(0)
        near = [self.facility_boxes[i] for i in np.flatnonzero(d < radius + 6.0)]
        cl = self.spec.centerline
        for occ in self.occluders:
            s = occ.s0 + occ.speed * t
            c = cl.to_global(np.array([s]), np.array([self.spec.lane_center(occ.lane)]))[0]
            if np.hypot(*(c - xy)) < radius + 6.0:
                near.append(
                    Box(np.array([c[0], c[1], 0.75]), float(cl.heading(s)), np.array([0.9, 2.25, 0.75]), "vehicle")
                )
        return near


def _box_hits(origin, dirs_g, box: Box, model: LidarModel, psi: float):
    """Ray indices and distances hitting ``box``; rays limited to its angular window."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # box axes in the local plane: across = right of its heading, along = heading
    ax_across = np.array([s, -c, 0.0])
    ax_along = np.array([c, s, 0.0])
    ax_up = np.array([0.0, 0.0, 1.0])
    axes = np.stack([ax_across, ax_along, ax_up])
    corners = np.array(
        [[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float
    ) * box.half
    rel = box.center - origin + corners @ axes
    dist = np.linalg.norm(rel, axis=1)
    if dist.min() > model.range_max:
        return None
    n_ch, n_col = dirs_g.shape[:2]
    horiz = np.hypot(rel[:, 0], rel[:, 1])
    if horiz.min() < 1e-6 or np.any(np.linalg.norm(box.center[:2] - origin[:2]) < np.max(box.half[:2]) * 1.5):
        ch_idx = np.arange(n_ch)
        col_idx = np.arange(n_col)
    else:
        el = np.degrees(np.arctan2(rel[:, 2], horiz))
        elev = model.elevation_deg
        ch_idx = np.flatnonzero((elev >= el.min() - 1e-9) & (elev <= el.max() + 1e-9))
        if ch_idx.size == 0:
            return None
        rel_v = global_to_vehicle(rel[:, :2], psi)
        ang = np.arctan2(rel_v[:, 0], rel_v[:, 1])  # clockwise from forward
        ref = ang[0]
        offs = wrap_angle(ang - ref)
        lo, hi = ref + offs.min(), ref + offs.max()
        step = 2.0 * math.pi / n_col
        i0 = int(math.floor(lo / step))
        i1 = int(math.ceil(hi / step))
        col_idx = np.arange(i0, i1 + 1) % n_col
    d = dirs_g[np.ix_(ch_idx, col_idx)]
    o = origin - box.center
    # slab test in box coordinates
    o_b = axes @ o
    d_b = d @ axes.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_b
        t1 = (-box.half - o_b) * inv
        t2 = (box.half - o_b) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0)
    t_hit = np.where(tmin > 0, tmin, tmax)
    if not np.any(hit):
        return None
    ci, cj = np.nonzero(hit)
    return ch_idx[ci], col_idx[cj], t_hit[hit]


def raycast_scan(
    truth: Pose2D,
    model: LidarModel,
    world: World,
    rng: np.random.Generator | None = None,
    t: float = 0.0,
    speed: float = 0.0,
) -> Scan:
    """Cast every ray of ``model`` from ``truth`` into ``world``."""
    if rng is None:
        rng = np.random.default_rng(0)
    spec = world.spec
    cl = spec.centerline
    h = model.mount_height
    dirs_v = model.directions
    n_ch, n_col = dirs_v.shape[:2]
    origin = np.array([truth.x, truth.y, h])

    # directions in the local plane
    c, sn = math.cos(truth.psi - 0.5 * math.pi), math.sin(truth.psi - 0.5 * math.pi)
    dirs_g = dirs_v @ np.array([[c, sn, 0.0], [-sn, c, 0.0], [0.0, 0.0, 1.0]])

    best_t = np.full((n_ch, n_col), np.inf)
    material = np.zeros((n_ch, n_col), dtype=np.int8)  # 0 none, 1 ground, 2 wall, 3 facility, 4 vehicle

    # tunnel wall, solved in the tangent frame at the vehicle's station
    s0_arr, u0_arr = cl.project(truth.xy[None, :])
    s0, u0 = float(s0_arr[0]), float(u0_arr[0])
    psi_c = float(cl.heading(s0))
    right = np.array([math.sin(psi_c), -math.cos(psi_c)])
    fwd = np.array([math.cos(psi_c), math.sin(psi_c)])
    du = dirs_g[..., 0] * right[0] + dirs_g[..., 1] * right[1]
    ds = dirs_g[..., 0] * fwd[0] + dirs_g[..., 1] * fwd[1]
    dz = dirs_g[..., 2]
    a2, b2 = spec.a**2, spec.b**2
    A = du**2 / a2 + dz**2 / b2
    B = 2.0 * (u0 * du / a2 + h * dz / b2)
    C = u0**2 / a2 + h**2 / b2 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.maximum(B**2 - 4.0 * A * C, 0.0)
        tw = (-B + np.sqrt(disc)) / (2.0 * A)
    tw = np.where((A > 1e-12) & (C < 0), tw, np.inf)
    cand = np.isfinite(tw) & (tw <= model.range_max)
    if spec.curvature != 0.0 and np.any(cand):
        tc = tw[cand]
        dg = dirs_g[cand]
        for _ in range(4):
            p = origin + tc[:, None] * dg
            s_p, u_p = cl.project(p[:, :2])
            ps = cl.heading(s_p)
            du_p = dg[:, 0] * np.sin(ps) - dg[:, 1] * np.cos(ps)
            g = u_p**2 / a2 + p[:, 2] ** 2 / b2 - 1.0
            gp = 2.0 * u_p * du_p / a2 + 2.0 * p[:, 2] * dg[:, 2] / b2
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = tc - np.where(np.abs(gp) > 1e-9, g / gp, 0.0)
        tw_c = np.full(tc.shape, np.inf)
        ok = np.abs(g) < 1e-6
        tw_c[ok] = tc[ok]
        tw = np.full_like(tw, np.inf)
        tw[cand] = tw_c
        s_hit = np.full_like(tw, np.nan)
        s_hit[cand] = s_p
    else:
        s_hit = s0 + tw * ds
    with np.errstate(invalid="ignore"):
        z_hit = h + tw * dz
    wall_ok = np.isfinite(tw) & (tw > 0) & (z_hit >= 0) & (s_hit >= 0) & (s_hit <= spec.length)
    best_t = np.where(wall_ok, tw, best_t)
    material[wall_ok] = 2

    # road plane
    with np.errstate(divide="ignore"):
        tg = np.where(dz < -1e-9, h / -dz, np.inf)
    g_ok = tg < best_t
    best_t = np.where(g_ok, tg, best_t)
    material[g_ok] = 1

    # facility boxes and vehicles
    for box in world.boxes_near(truth.xy, model.range_max, t):
        res = _box_hits(origin, dirs_g, box, model, truth.psi)
        if res is None:
            continue
        ci, cj, th = res
        closer = th < best_t[ci, cj]
        ci, cj, th = ci[closer], cj[closer], th[closer]
        best_t[ci, cj] = th
        material[ci, cj] = 4 if box.material == "vehicle" else 3

    idx = np.flatnonzero(best_t <= model.range_max)
    ci, cj = np.divmod(idx, n_col)
    tr = best_t.ravel().take(idx)
    mat = material.ravel().take(idx)
    # one draw per ray, hit or not, so a change in the scene only perturbs the rays it touches
    range_z = rng.standard_normal(n_ch * n_col).take(idx)
    inten_z = rng.standard_normal(n_ch * n_col).take(idx)
    if model.range_noise_sigma > 0:
        tr = tr + model.range_noise_sigma * range_z
    d = dirs_v.reshape(-1, 3).take(idx, axis=0)
    xyz = tr[:, None] * d
    xyz[:, 2] += h

    code = mat.astype(np.intp)
    ground = mat == 1
    if np.any(ground):
        gxy = origin[:2] + (tr[ground, None] * dirs_g[ci[ground], cj[ground], :2])
        _, ug = cl.project(gxy)
        lines = spec.lane_lines()
        on_paint = np.min(np.abs(ug[:, None] - lines[None, :]), axis=1) <= PAINT_HALF_WIDTH
        code[np.flatnonzero(ground)[on_paint]] = 5
    inten = _INTENSITY_TABLE[0].take(code) + _INTENSITY_TABLE[1].take(code) * inten_z
    inten = np.clip(inten, 0.0, 255.0)

    if model.distort and speed > 0:
        # column j is sampled j/n_col of a period into the sweep; earlier samples sit further ahead
        xyz[:, 1] += speed * (1.0 - cj / n_col) / model.rate
    return Scan(xyz, inten, t)


def _spawn(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _target_u(route: Route, spec: TunnelSpec, s):
    base = spec.lane_center(route.lane)
    if route.wander_amplitude == 0.0:
        return np.full_like(np.asarray(s, dtype=float), base)
    return base + route.wander_amplitude * np.sin(2.0 * math.pi * np.asarray(s) / route.wander_wavelength)


def place_occluders(
    spec: TunnelSpec, route: Route, density: float, rng: np.random.Generator, end_s: float
) -> list[Occluder]:
    """Vehicles in the other lanes; ``density`` is the occupied fraction of lane length."""
    if density <= 0:
        return []
    out = []
    lo, hi = route.start_s - 250.0, end_s + 250.0
    mean_gap = 4.5 / density
    for lane in range(1, spec.lane_count + 1):
        if lane == route.lane:
            continue
        s = lo + rng.uniform(0.0, mean_gap)
        while s < hi:
            dv = rng.uniform(-10.0, 10.0) * KMH
            out.append(Occluder(lane, s, route.speed + dv))
            s += 4.5 + 2.0 + rng.exponential(max(mean_gap - 4.5, 0.5))
    return out


def simulate_drive(
    spec: TunnelSpec,
    route: Route = Route(),
    lidar: LidarModel = LidarModel(),
    dr: DrModel = DrModel(),
    gps: GpsModel = GpsModel(),
    occluder_density: float = 0.05,
    seed: int = 0,
    world: World | None = None,
    with_scans: bool = True,
) -> Iterator[SimFrame]:
    """Generate frames at the LIDAR rate along ``route``.

    The truth follows a pure-pursuit lane-keeping law with piecewise-constant
    (speed, yaw rate) held over each LIDAR period, integrated with the same
    Euler step the filter uses. Frame ``k`` carries the dead-reckoning
    average over the period ending at ``t_k``.
    """
    if route.speed <= 0:
        raise ValueError("speed must be positive")
    rng_occ, rng_lidar, rng_dr, rng_gps = _spawn(seed, 4)
    if world is None:
        world = World.build(spec, seed)
    end_s = spec.length + 20.0 if route.end_s is None else route.end_s
    world.occluders = place_occluders(spec, route, occluder_density, rng_occ, end_s)
    cl = spec.centerline
    dt = 1.0 / lidar.rate
    sub = max(1, int(round(dr.rate / lidar.rate)))
    dts = dt / sub

    s = route.start_s
    u = float(_target_u(route, spec, s))
    p = cl.to_global(np.array([s]), np.array([u]))[0]
    p_ahead = cl.to_global(np.array([s + 1.0]), _target_u(route, spec, np.array([s + 1.0])))[0]
    pose = np.array([p[0], p[1], math.atan2(*(p_ahead - p)[::-1])])

    gyro_bias = dr.gyro_bias
    speed_err = 0.0
    gyro_sd = dr.gyro_noise * math.sqrt(dr.rate)
    accel_sd = dr.accel_noise * math.sqrt(dr.rate)
    prev_ctrl = None
    k = 0
    while True:
        t = k * dt
        truth = Pose2D.from_array(pose)
        s_arr, _ = cl.project(truth.xy[None, :])
        s_now = float(s_arr[0])
        if prev_ctrl is None:
            v_dr, w_dr = route.speed, 0.0
        else:
            v, w = prev_ctrl
            vs, ws = [], []
            for _ in range(sub):
                speed_err += (dr.accel_bias + accel_sd * rng_dr.standard_normal()) * dts
                vs.append(v + speed_err + dr.speed_noise * rng_dr.standard_normal())
                ws.append(w + gyro_bias + gyro_sd * rng_dr.standard_normal())
            v_dr, w_dr = float(np.mean(vs)), float(np.mean(ws))
        in_tunnel = bool(spec.inside(s_now))
        if in_tunnel:
            fix, fix_psi = None, None
        else:
            fix = truth.xy + gps.sigma * rng_gps.standard_normal(2)
            fix_psi = float(wrap_angle(truth.psi + gps.heading_sigma * rng_gps.standard_normal()))
        scan = raycast_scan(truth, lidar, world, rng_lidar, t, route.speed) if with_scans else Scan.empty(t)
        yield SimFrame(t, truth, scan, v_dr, w_dr, fix, fix_psi, s_now, in_tunnel)
        if s_now >= end_s:
            return
        # pure pursuit toward the lane target ahead
        s_t = s_now + route.lookahead
        target = cl.to_global(np.array([s_t]), _target_u(route, spec, np.array([s_t])))[0]
        rel = target - pose[:2]
        alpha = wrap_angle(math.atan2(rel[1], rel[0]) - pose[2])
        ld = float(np.hypot(*rel))
        w_cmd = 2.0 * route.speed * math.sin(alpha) / ld
        v_cmd = route.speed
        pose = pose + dt * np.array([v_cmd * math.cos(pose[2]), v_cmd * math.sin(pose[2]), w_cmd])
        pose[2] = wrap_angle(pose[2])
        prev_ctrl = (v_cmd, w_cmd)
        k += 1


def integrate_dr(frames, start: Pose2D | None = None) -> list[Pose2D]:
    """Dead-reckoning track from the frames' speed / yaw-rate inputs."""
    out = []
    pose = None
    prev_t = None
    for f in frames:
        if pose is None:
            pose = (start or f.truth).as_array()
        else:
            dt = f.t - prev_t
            pose = pose + dt * np.array(
                [f.dr_speed * math.cos(pose[2]), f.dr_speed * math.sin(pose[2]), f.dr_yaw_rate]
            )
            pose[2] = wrap_angle(pose[2])
        prev_t = f.t
        out.append(Pose2D.from_array(pose))
    return out
