"""Comma-separated map files.

Landmarks: ``index,latitude,longitude,facility_type``.
Lanes: ``index,latitude,longitude,sigma_xx,sigma_yy,sigma_xy``.
Both carry a one-line header; coordinates are written with 8 decimals.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..geometry import GeoOrigin, geo_to_local, local_to_geo
from ..tunnel import FacilityKind, Landmark, LandmarkMap, LaneDistMap

log = logging.getLogger(__name__)

LANDMARK_HEADER = ["index", "latitude", "longitude", "facility_type"]
LANE_HEADER = ["index", "latitude", "longitude", "sigma_xx", "sigma_yy", "sigma_xy"]


class MapFormatError(ValueError):
    def __init__(self, path, problems: list[str]):
        self.path = str(path)
        self.problems = problems
        super().__init__(f"{path}: " + "; ".join(problems))


def write_landmark_map(path, landmarks: LandmarkMap, origin: GeoOrigin) -> None:
    ll = local_to_geo(landmarks.positions, origin) if len(landmarks) else np.zeros((0, 2))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANDMARK_HEADER)
        for i, (kind, (lat, lon)) in enumerate(zip(landmarks.kinds, ll), start=1):
            w.writerow([i, f"{lat:.8f}", f"{lon:.8f}", kind.value])


def write_lane_map(path, lanes: LaneDistMap, origin: GeoOrigin) -> None:
    ll = local_to_geo(lanes.means, origin) if len(lanes) else np.zeros((0, 2))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANE_HEADER)
        for i, ((lat, lon), c) in enumerate(zip(ll, lanes.covs), start=1):
            w.writerow([i, f"{lat:.8f}", f"{lon:.8f}", f"{c[0, 0]:.8g}", f"{c[1, 1]:.8g}", f"{c[0, 1]:.8g}"])


def _rows(path, header):
    with open(path, newline="") as fh:
        rows = [(n, r) for n, r in enumerate(csv.reader(fh), start=1) if any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0][1]] == header:
        rows = rows[1:]
    return rows


def read_landmark_map(path, origin: GeoOrigin, heights: dict | None = None) -> LandmarkMap:
    rows = _rows(path, LANDMARK_HEADER)
    if not rows:
        log.warning("landmark map %s is empty", path)
        return LandmarkMap()
    problems, parsed = [], []
    for line, r in rows:
        if len(r) != 4:
            problems.append(f"line {line}: expected 4 fields, got {len(r)}")
            continue
        try:
            lat, lon = float(r[1]), float(r[2])
            kind = FacilityKind(r[3].strip())
        except ValueError as exc:
            problems.append(f"line {line}: {exc}")
            continue
        if not kind.usable:
            problems.append(f"line {line}: {kind.value} is not a landmark kind")
            continue
        if not abs(lat) < 90:
            problems.append(f"line {line}: latitude out of range")
            continue
        parsed.append((kind, lat, lon))
    if problems:
        raise MapFormatError(path, problems)
    xy = geo_to_local([p[1] for p in parsed], [p[2] for p in parsed], origin)
    heights = heights or {}
    return LandmarkMap(
        Landmark(k, p, float(heights.get(k, 0.0))) for (k, _, _), p in zip(parsed, xy)
    )


def read_lane_map(path, origin: GeoOrigin) -> LaneDistMap:
    rows = _rows(path, LANE_HEADER)
    if not rows:
        log.warning("lane map %s is empty", path)
        return LaneDistMap(np.zeros((0, 2)), np.zeros((0, 2, 2)))
    problems, ll, covs = [], [], []
    for line, r in rows:
        if len(r) != 6:
            problems.append(f"line {line}: expected 6 fields, got {len(r)}")
            continue
        try:
            idx = r[0].strip()
            lat, lon, sxx, syy, sxy = (float(v) for v in r[1:])
        except ValueError as exc:
            problems.append(f"line {line}: {exc}")
            continue
        c = np.array([[sxx, sxy], [sxy, syy]])
        if not (sxx > 0 and syy > 0 and sxx * syy - sxy * sxy > 0):
            problems.append(f"line {line}: covariance of row {idx} is not positive definite")
            continue
        ll.append((lat, lon))
        covs.append(c)
    if problems:
        raise MapFormatError(path, problems)
    ll = np.array(ll)
    return LaneDistMap(geo_to_local(ll[:, 0], ll[:, 1], origin), np.array(covs))


def load_maps(landmark_file, lane_file, origin: GeoOrigin, heights: dict | None = None):
    for p in (landmark_file, lane_file):
        if not Path(p).is_file():
            raise FileNotFoundError(p)
    return read_landmark_map(landmark_file, origin, heights), read_lane_map(lane_file, origin)
