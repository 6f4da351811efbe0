"""Per-scan feature extraction: tunnel-frame alignment, wall removal, facility
clustering and lane-marking points.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree
from sklearn import config_context
from sklearn.metrics import silhouette_score

from .registration import IcpDiverged, RigidCorrection, apply_planar, icp
from .sim import Scan
from .tunnel import FacilityKind, TunnelSpec, ellipse_ring, virtual_cylinder


class WallNotVisible(RuntimeError):
    pass


@dataclass(frozen=True)
class WallFilter:
    a: float = 7.0
    b: float = 6.8
    wall_margin: float = 0.30

    def __post_init__(self):
        # zero is allowed: it is the degenerate no-margin case
        if not 0 <= self.wall_margin < min(self.a, self.b):
            raise ValueError("wall margin must lie in [0, min(a, b))")

    @classmethod
    def for_spec(cls, spec: TunnelSpec, wall_margin: float = 0.30) -> "WallFilter":
        return cls(spec.a, spec.b, wall_margin)

    def ellipse_value(self, x, z):
        return x**2 / self.a**2 + z**2 / self.b**2

    def threshold(self, x, z):
        """Wall-removal threshold for each point, from the shrunken ellipse."""
        theta = np.arctan2(z, x)
        xs = (self.a - self.wall_margin) * np.cos(theta)
        zs = (self.b - self.wall_margin) * np.sin(theta)
        return xs**2 / self.a**2 + zs**2 / self.b**2

    def threshold_bounds(self) -> tuple[float, float]:
        """Smallest and largest value :meth:`threshold` can take."""
        ends = ((1.0 - self.wall_margin / self.a) ** 2, (1.0 - self.wall_margin / self.b) ** 2)
        return min(ends), max(ends)

    def inside(self, x, z) -> np.ndarray:
        """Strictly inside the threshold surface; the exact test runs only where the bounds disagree."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        e = self.ellipse_value(x, z)
        lo, hi = self.threshold_bounds()
        keep = e < lo
        amb = np.flatnonzero((e >= lo) & (e < hi))
        if amb.size:
            keep[amb] = e[amb] < self.threshold(x[amb], z[amb])
        return keep


@dataclass
class FacilityDetection:
    kind: FacilityKind
    center: np.ndarray  # vehicle frame x, y, z
    point_count: int
    bbox: np.ndarray  # across, along, height
    points: np.ndarray | None = field(default=None, repr=False)
    anchor: np.ndarray | None = None  # estimated unit centre, vehicle frame

    @property
    def position(self) -> np.ndarray:
        """Point used for map matching: the unit centre estimate when there is one."""
        return self.center if self.anchor is None else self.anchor


@dataclass
class AlignResult:
    shift: float
    azimuth: float
    rms_before: float = 0.0
    rms_after: float = 0.0
    correction: RigidCorrection | None = None
    along: float = 0.0  # only non-zero for 3-DOF alignment

    def to_tunnel(self, xyz: np.ndarray) -> np.ndarray:
        return apply_planar(xyz, self.shift, self.along, self.azimuth)

    def to_vehicle(self, xyz: np.ndarray) -> np.ndarray:
        pts = np.array(xyz, dtype=float, copy=True)
        pts[:, 0] -= self.shift
        pts[:, 1] -= self.along
        return apply_planar(pts, 0.0, 0.0, -self.azimuth)

    def deyaw(self, xyz: np.ndarray) -> np.ndarray:
        return apply_planar(xyz, 0.0, 0.0, self.azimuth)


@dataclass(frozen=True)
class ExtractionConfig:
    wall_margin: float = 0.30
    sample_band: float = 0.5
    align_band: float = 1.0
    align_window: float = 15.0
    align_min_height: float = 1.6
    align_dof: int = 2
    align_max_iter: int = 30
    align_max_points: int = 800
    cylinder_angular_res: float = 0.05
    cylinder_ring_spacing: float | None = None  # None: continuous along the axis
    roi_window: float = 40.0
    lamp_band: tuple[float, float] = (2.3, 3.2)
    exit_light_band: tuple[float, float] = (1.3, 2.2)
    ceiling_band: tuple[float, float] = (4.8, 5.7)
    min_cluster_size: int = 4
    silhouette_min: float = 0.7
    bbox_tolerance: float = 0.5
    bbox_slack: float = 0.15
    lane_intensity: float = 100.0
    lane_height: float = 0.3
    lane_max_points: int = 500
    face_offset: bool = True
    lane_max_range: float = 50.0


# ---------------------------------------------------------------- wall handling


def sample_near_wall(
    scan: Scan,
    filt: WallFilter,
    band: float = 0.5,
    window: float | None = None,
    min_height: float | None = None,
    min_points: int = 50,
) -> Scan:
    """Points within ``band`` metres of the wall ellipse (radially).

    ``window`` and ``min_height`` optionally restrict the sample to
    |y| <= window and z >= min_height. Returns an empty scan when fewer than
    ``min_points`` survive, which callers read as "no wall in view".
    """
    if band <= 0:
        raise ValueError("band must be positive")
    if len(scan) == 0:
        return scan
    x, y, z = scan.xyz.T
    r = min(filt.a, filt.b)
    lo = max(0.0, 1.0 - band / r) ** 2
    hi = (1.0 + band / r) ** 2
    e = filt.ellipse_value(x, z)
    keep = (e >= lo) & (e <= hi)
    if window is not None:
        keep &= np.abs(y) <= window
    if min_height is not None:
        keep &= z >= min_height
    if keep.sum() < min_points:
        return Scan.empty(scan.t)
    return scan.subset(keep)


def remove_wall(scan: Scan, filt: WallFilter) -> Scan:
    """Drop every point on or outside the shrunken-ellipse threshold surface."""
    if len(scan) == 0:
        return scan
    return scan.subset(filt.inside(scan.xyz[:, 0], scan.xyz[:, 2]))


def wall_distances(
    xyz: np.ndarray, spec: TunnelSpec, z_band=(3.3, 5.0), window: float = 10.0, min_points: int = 10
) -> tuple[float, float]:
    """Robust (20th percentile) distances to the left and right walls.

    Each point's distance is referred to the springline (z = 0) width so that
    points at different heights agree.
    """
    x, y, z = xyz.T
    band = (z >= z_band[0]) & (z <= z_band[1]) & (np.abs(y) <= window)
    ref = spec.wall_u(z[band])
    xb = x[band]
    right = xb > 0
    if right.sum() < min_points or (~right).sum() < min_points:
        raise WallNotVisible("wall not visible on both sides")
    d_right = np.percentile(xb[right] + spec.a - ref[right], 20)
    d_left = np.percentile(-xb[~right] + spec.a - ref[~right], 20)
    return float(d_left), float(d_right)


def lane_from_offset(offset: float, spec: TunnelSpec) -> int:
    """Lane index (1 = leftmost) for a lateral offset from the tunnel centre, right positive."""
    k = math.floor((offset + spec.lane_count * spec.lane_width / 2.0) / spec.lane_width) + 1
    return int(min(max(k, 1), spec.lane_count))


def determine_lane(scan: Scan, spec: TunnelSpec) -> int:
    """Current lane from the wall widths on either side of a heading-aligned scan."""
    d_left, d_right = wall_distances(scan.xyz, spec)
    # a vehicle right of centre sees the left wall further away
    return lane_from_offset(0.5 * (d_left - d_right), spec)


@lru_cache(maxsize=8)
def _cylinder(spec: TunnelSpec, angular_res: float, ring_spacing: float, span: float):
    pts = virtual_cylinder(spec, angular_res, ring_spacing, span)
    return pts, cKDTree(pts)


@lru_cache(maxsize=8)
def _section(spec: TunnelSpec, angular_res: float):
    ring = ellipse_ring(spec, angular_res)[:, [0, 2]]
    return ring, cKDTree(ring)


def cylinder_matcher(spec: TunnelSpec, angular_res: float):
    """Nearest points on the wall cylinder, each point matched within its own cross-section.

    The cylinder is invariant along its axis, so this is the limit of
    :func:`virtual_cylinder` as the ring spacing goes to zero.
    """
    ring, tree = _section(spec, angular_res)

    def nearest(pts, bound):
        d, idx = tree.query(pts[:, [0, 2]], distance_upper_bound=bound)
        q = pts.copy()
        hit = ring[np.minimum(idx, ring.shape[0] - 1)]
        q[:, 0] = hit[:, 0]
        q[:, 2] = hit[:, 1]
        return d, q

    return nearest


def align_to_tunnel(
    scan: Scan, spec: TunnelSpec, config: ExtractionConfig = ExtractionConfig()
) -> tuple[AlignResult, Scan]:
    """Estimate the lateral shift and azimuth that put ``scan`` in the tunnel frame.

    The returned scan has the tunnel axis along y and the ellipse centre at
    x = 0. Raises :class:`WallNotVisible` without wall points and
    :class:`IcpDiverged` when the fit is implausible.
    """
    res = fit_alignment(scan, spec, config)
    return res, Scan(res.to_tunnel(scan.xyz), scan.intensity, scan.t)


def fit_alignment(scan: Scan, spec: TunnelSpec, config: ExtractionConfig = ExtractionConfig()) -> AlignResult:
    """The transform part of :func:`align_to_tunnel`, without transforming the scan."""
    filt = WallFilter.for_spec(spec, config.wall_margin)
    d_left, d_right = wall_distances(scan.xyz, spec)
    shift0 = 0.5 * (d_left - d_right)
    pre = Scan(scan.xyz + np.array([shift0, 0.0, 0.0]), scan.intensity, scan.t)
    near = sample_near_wall(pre, filt, config.align_band, config.align_window, config.align_min_height)
    if len(near) == 0:
        raise WallNotVisible("no wall points near the expected ellipse")
    src = near.xyz
    src[:, 0] -= shift0
    if src.shape[0] > config.align_max_points:
        src = src[:: int(math.ceil(src.shape[0] / config.align_max_points))]
    if config.cylinder_ring_spacing is None:
        target, tree = _section(spec, config.cylinder_angular_res)[0], None
        nearest = cylinder_matcher(spec, config.cylinder_angular_res)
    else:
        span = 2.0 * config.align_window + 4.0
        target, tree = _cylinder(spec, config.cylinder_angular_res, config.cylinder_ring_spacing, span)
        nearest = None
    corr = icp(
        src, target, dof=config.align_dof, max_iter=config.align_max_iter,
        max_corr_dist=config.align_band + 0.5, init=(shift0, 0.0, 0.0), tree=tree, nearest=nearest,
    )
    if abs(corr.dx) > 2.0 * spec.lane_width or abs(corr.dpsi) > math.radians(15.0):
        raise IcpDiverged(f"implausible alignment: shift {corr.dx:.2f} m, azimuth {math.degrees(corr.dpsi):.1f} deg")
    return AlignResult(corr.dx, corr.dpsi, corr.history[0], corr.score, corr, along=corr.dy)


# ---------------------------------------------------------------- classification


def classify_roi(
    points: Scan, spec: TunnelSpec, config: ExtractionConfig = ExtractionConfig()
) -> dict[FacilityKind, Scan]:
    """Partition wall-removed, tunnel-frame points into facility buckets by height and side."""
    x, y, z = points.xyz.T if len(points) else (np.zeros(0),) * 3
    inside = np.abs(y) <= config.roi_window
    side = spec.road_half_width
    lamp = inside & (z >= config.lamp_band[0]) & (z <= config.lamp_band[1]) & (x > side)
    exit_light = (
        inside & (z >= config.exit_light_band[0]) & (z <= config.exit_light_band[1]) & (x < -side)
    )
    ceiling = inside & (z >= config.ceiling_band[0]) & (z <= config.ceiling_band[1])
    centers = np.array([spec.lane_center(k) for k in range(1, spec.lane_count + 1)])
    near_centre = np.min(np.abs(x[:, None] - centers[None, :]), axis=1) <= spec.lane_width / 4.0
    # exit signs hang over the leftmost divider, next to the evacuation corridor
    corridor = np.abs(x - spec.lane_lines()[min(1, spec.lane_count)]) <= spec.lane_width / 4.0
    out = {
        FacilityKind.LAMP: lamp,
        FacilityKind.EXIT_LIGHT: exit_light & ~lamp,
        FacilityKind.LCS: ceiling & near_centre & ~lamp & ~exit_light,
        FacilityKind.EXIT_SIGN: ceiling & corridor & ~near_centre & ~lamp & ~exit_light,
    }
    return {k: points.subset(m) for k, m in out.items()}


def _expected_count(kind: FacilityKind, spec: TunnelSpec, window: float, jitter: float = 0.5) -> int:
    """Most units of ``kind`` that fit in a +-``window`` slice, allowing for placement jitter."""
    try:
        rule = spec.rule(kind)
    except KeyError:
        return 1
    per_site = spec.lane_count if kind is FacilityKind.LCS else 1
    spacing = max(rule.interval - 2.0 * jitter, 1e-6)
    return per_site * (int(math.floor(2.0 * window / spacing)) + 1)


def _kmeans(pts: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return np.zeros(pts.shape[0], dtype=int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(pts, k, minit="++", seed=np.random.default_rng(k))
    return labels


def _choose_labels(pts: np.ndarray, k_max: int, threshold: float) -> np.ndarray:
    best, best_score = _kmeans(pts, 1), -1.0
    k_max = min(k_max, pts.shape[0] - 1)
    for k in range(2, k_max + 1):
        labels = _kmeans(pts, k)
        if np.unique(labels).size < 2:
            continue
        # inputs are already validated float arrays; skip the per-call checks
        with config_context(assume_finite=True, skip_parameter_validation=True):
            score = silhouette_score(
                pts, labels, sample_size=min(pts.shape[0], 200), random_state=0
            )
        if score > best_score:
            best, best_score = labels, score
    if best_score < threshold:
        return np.zeros(pts.shape[0], dtype=int)
    return best


def cluster_facilities(
    buckets: dict[FacilityKind, Scan],
    spec: TunnelSpec,
    config: ExtractionConfig = ExtractionConfig(),
) -> list[FacilityDetection]:
    """k-means per bucket (k by silhouette sweep), then size gating and centroids.

    Centres are returned in the same frame as the bucket points.
    """
    out = []
    for kind, pts_scan in buckets.items():
        pts = pts_scan.xyz
        if pts.shape[0] < config.min_cluster_size:
            continue
        limit = (1.0 + config.bbox_tolerance) * spec.rule(kind).extents + config.bbox_slack
        if np.all(pts.max(axis=0) - pts.min(axis=0) <= limit):
            # the whole bucket fits one unit
            labels = np.zeros(pts.shape[0], dtype=int)
        else:
            k_max = _expected_count(kind, spec, config.roi_window) + 1
            labels = _choose_labels(pts, k_max, config.silhouette_min)
        for lab in np.unique(labels):
            c = pts[labels == lab]
            if c.shape[0] < config.min_cluster_size:
                continue
            bbox = c.max(axis=0) - c.min(axis=0)
            if np.any(bbox > limit):
                continue
            out.append(FacilityDetection(kind, c.mean(axis=0), int(c.shape[0]), bbox, c))
    out.sort(key=lambda d: (d.kind.value, float(d.center[1])))
    return out


def face_to_center(det: FacilityDetection, spec: TunnelSpec) -> np.ndarray:
    """Estimate the unit centre (tunnel frame) from the points of its visible faces.

    The point average is pulled toward the sensor: only near faces are hit and
    near surfaces are sampled more densely. Wall units show their whole
    road-facing side and its road-most points sit half a depth in front of the
    centre. Along the tunnel a flush unit is sampled evenly, so its extent
    midpoint is unbiased; a protruding one is sampled mostly on its near side
    face. Ceiling units are mostly seen on the face toward the vehicle.
    """
    across, along, _ = spec.rule(det.kind).extents
    c = np.array(det.center, dtype=float)
    pts = det.points
    if det.kind in (FacilityKind.LAMP, FacilityKind.EXIT_LIGHT):
        side = math.copysign(1.0, c[0])
        if pts is None or len(pts) < 3:
            c[0] += side * 0.5 * across
            return c
        c[0] = side * (np.percentile(np.abs(pts[:, 0]), 10) + 0.5 * across)
        if across > 0.5 * along:
            # protruding unit: at grazing incidence its near side face dominates
            ahead = math.copysign(1.0, c[1])
            near = ahead * np.percentile(ahead * pts[:, 1], 10)
            c[1] = near + ahead * 0.5 * along
        else:
            c[1] = 0.5 * (pts[:, 1].min() + pts[:, 1].max())
    else:
        c[1] += math.copysign(0.5 * along, c[1])
    return c


def extract_lane_points(
    scan: Scan,
    intensity_threshold: float = 100.0,
    height_band: float = 0.3,
    max_points: int = 500,
    max_range: float | None = 50.0,
) -> Scan:
    """High-intensity ground returns, thinned by a uniform stride."""
    if len(scan) == 0:
        return scan
    keep = (np.abs(scan.xyz[:, 2]) <= height_band) & (scan.intensity > intensity_threshold)
    if max_range is not None:
        keep &= np.hypot(scan.xyz[:, 0], scan.xyz[:, 1]) <= max_range
    out = scan.subset(keep)
    if len(out) > max_points:
        out = out.subset(slice(None, None, int(math.ceil(len(out) / max_points))))
    return out


# ---------------------------------------------------------------- pipeline


@dataclass
class Extraction:
    detections: list[FacilityDetection] = field(default_factory=list)
    lane_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    align: AlignResult | None = None
    walls_visible: bool = False
    lane: int | None = None
    error: str | None = None
    timings: dict = field(default_factory=dict)

    def count(self, kind: FacilityKind) -> int:
        return sum(1 for d in self.detections if d.kind is kind)


def extract(scan: Scan, spec: TunnelSpec, config: ExtractionConfig = ExtractionConfig()) -> Extraction:
    """Run the whole per-scan pipeline; failures are reported, not raised."""
    res = Extraction()
    t0 = time.perf_counter()
    lanes = extract_lane_points(
        scan, config.lane_intensity, config.lane_height, config.lane_max_points, config.lane_max_range
    )
    res.lane_points = lanes.xyz
    t1 = time.perf_counter()
    res.timings["lane_ms"] = 1e3 * (t1 - t0)
    try:
        align = fit_alignment(scan, spec, config)
    except (WallNotVisible, IcpDiverged) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        res.timings["align_ms"] = 1e3 * (time.perf_counter() - t1)
        return res
    res.align = align
    res.walls_visible = True
    res.lane = lane_from_offset(align.shift, spec)
    t2 = time.perf_counter()
    res.timings["align_ms"] = 1e3 * (t2 - t1)
    filt = WallFilter.for_spec(spec, config.wall_margin)
    # only the facility bands matter, so cut everything else before transforming
    z = scan.xyz[:, 2]
    band = (z >= config.exit_light_band[0]) & (z <= config.ceiling_band[1])
    band &= np.abs(scan.xyz[:, 1]) <= config.roi_window + 5.0
    sub = scan.subset(band)
    aligned = Scan(align.to_tunnel(sub.xyz), sub.intensity, sub.t)
    aligned = aligned.subset(np.abs(aligned.xyz[:, 1]) <= config.roi_window)
    inner = remove_wall(aligned, filt)
    t3 = time.perf_counter()
    res.timings["wall_ms"] = 1e3 * (t3 - t2)
    dets = cluster_facilities(classify_roi(inner, spec, config), spec, config)
    kept = []
    for d in dets:
        c = d.center
        if filt.ellipse_value(c[0], c[2]) < filt.threshold(c[0], c[2]):
            if config.face_offset:
                d.anchor = align.to_vehicle(face_to_center(d, spec)[None, :])[0]
            d.center = align.to_vehicle(c[None, :])[0]
            kept.append(d)
    res.detections = kept
    res.timings["cluster_ms"] = 1e3 * (time.perf_counter() - t3)
    return res
