"""Scenario definition and INI-style config parsing."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..geometry import GeoOrigin
from ..localizer import ALL_FEATURES, LANE_MARKING, LocalizerConfig, NoiseConfig
from ..sim import KMH, DrModel, GpsModel, LidarModel, Route
from ..tunnel import FacilityKind, TunnelSpec

DEFAULT_ORIGIN = GeoOrigin(37.2701688, 127.1832586)

_KIND_ALIASES = {
    "lamp": FacilityKind.LAMP.value,
    "fireextinguisherlamp": FacilityKind.LAMP.value,
    "exitlight": FacilityKind.EXIT_LIGHT.value,
    "exitsign": FacilityKind.EXIT_SIGN.value,
    "lcs": FacilityKind.LCS.value,
    "lanemarking": LANE_MARKING,
    "lane": LANE_MARKING,
}


class ScenarioError(ValueError):
    pass


def parse_features(text: str) -> frozenset:
    out = set()
    for tok in (t.strip() for t in text.replace(";", ",").split(",")):
        if not tok:
            continue
        key = tok.replace("_", "").replace("-", "").replace(" ", "").lower()
        if key not in _KIND_ALIASES:
            raise ScenarioError(f"unknown facility kind {tok!r}")
        out.add(_KIND_ALIASES[key])
    return frozenset(out)


@dataclass(frozen=True)
class Thresholds:
    lateral_rms: float = 0.15
    longitudinal_rms: float = 0.30
    mean_step_ms: float = 100.0
    max_step_ms: float = 200.0


@dataclass(frozen=True)
class Scenario:
    tunnel: TunnelSpec = field(default_factory=TunnelSpec)
    route: Route = field(default_factory=Route)
    lidar: LidarModel = field(default_factory=LidarModel)
    dr: DrModel = field(default_factory=DrModel)
    gps: GpsModel = field(default_factory=GpsModel)
    occluder_density: float = 0.05
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    seed: int = 1
    origin: GeoOrigin = DEFAULT_ORIGIN
    thresholds: Thresholds = field(default_factory=Thresholds)
    name: str = "default"

    def __post_init__(self):
        if FacilityKind.LAMP.value not in self.localizer.features:
            raise ScenarioError("ablation must keep the fire-extinguisher lamp")
        if not 1 <= self.route.lane <= self.tunnel.lane_count:
            raise ScenarioError(f"lane {self.route.lane} outside 1..{self.tunnel.lane_count}")
        if not 0.0 <= self.occluder_density < 1.0:
            raise ScenarioError("occluder density must lie in [0, 1)")

    @property
    def ablation(self) -> frozenset:
        return self.localizer.features

    def with_overrides(self, seed=None, lane=None, ablate=None, corrections=None) -> "Scenario":
        s = self
        if seed is not None:
            s = replace(s, seed=int(seed))
        if lane is not None:
            s = replace(s, route=replace(s.route, lane=int(lane)))
        if ablate:
            feats = s.localizer.features - frozenset(ablate)
            if FacilityKind.LAMP.value not in feats:
                raise ScenarioError("ablation must keep the fire-extinguisher lamp")
            s = replace(s, localizer=replace(s.localizer, features=feats))
        if corrections is not None:
            s = replace(s, localizer=replace(s.localizer, corrections=bool(corrections)))
        return s


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ScenarioError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _pair(s: str):
    parts = [float(p) for p in s.replace(";", ",").split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return tuple(parts)


_RANGE_KEYS = {
    "r_range_lamp": FacilityKind.LAMP.value,
    "r_range_exit_light": FacilityKind.EXIT_LIGHT.value,
    "r_range_lcs": FacilityKind.LCS.value,
    "r_range_exit_sign": FacilityKind.EXIT_SIGN.value,
}

KNOWN = {
    "scenario": {"name", "seed", "origin_lat", "origin_lon"},
    "tunnel": {"a", "b", "length", "lane_count", "lane_width", "curvature"},
    "route": {"lane", "speed_kmh", "start_s", "end_s", "wander_amplitude", "wander_wavelength"},
    "lidar": {"channels", "h_res_deg", "range_max", "range_noise", "rate", "mount_height", "distort"},
    "dr": {"gyro_bias_deg_h", "gyro_noise_deg_s", "accel_bias_ug", "accel_noise_ug", "speed_noise", "rate"},
    "gps": {"cep", "heading_sigma_deg"},
    "traffic": {"occluder_density"},
    "localizer": {
        "features", "ablate", "landmark_gate", "lane_euclid_gate", "lane_maha_gate", "ndt_max_iter",
        "q_pos", "q_heading_deg", "r_eta_pos", "r_eta_heading_deg", "r_range", "r_bearing_deg",
        "wall_margin", "entry_error", "corrections", "eta_inflation", *_RANGE_KEYS,
    },
    "thresholds": {"lateral_rms", "longitudinal_rms", "mean_step_ms", "max_step_ms"},
}


def scenario_from_config(cp: configparser.ConfigParser) -> Scenario:
    unknown = [s for s in cp.sections() if s not in KNOWN]
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(unknown)}")
    for sec in cp.sections():
        bad = set(cp.options(sec)) - KNOWN[sec]
        if bad:
            raise ScenarioError(f"[{sec}] unknown key(s): {', '.join(sorted(bad))}")
    d = Scenario()
    g = lambda sec, key, conv, default: _get(cp, sec, key, conv, default)  # noqa: E731
    try:
        tunnel = TunnelSpec(
            a=g("tunnel", "a", float, d.tunnel.a),
            b=g("tunnel", "b", float, d.tunnel.b),
            length=g("tunnel", "length", float, d.tunnel.length),
            lane_count=g("tunnel", "lane_count", int, d.tunnel.lane_count),
            lane_width=g("tunnel", "lane_width", float, d.tunnel.lane_width),
            curvature=g("tunnel", "curvature", float, d.tunnel.curvature),
        )
        end_s = g("route", "end_s", float, None)
        route = Route(
            lane=g("route", "lane", int, d.route.lane),
            speed=g("route", "speed_kmh", float, d.route.speed / KMH) * KMH,
            start_s=g("route", "start_s", float, d.route.start_s),
            end_s=end_s,
            wander_amplitude=g("route", "wander_amplitude", float, d.route.wander_amplitude),
            wander_wavelength=g("route", "wander_wavelength", float, d.route.wander_wavelength),
        )
        lidar = LidarModel(
            channels=g("lidar", "channels", int, d.lidar.channels),
            h_res=g("lidar", "h_res_deg", float, d.lidar.h_res),
            range_max=g("lidar", "range_max", float, d.lidar.range_max),
            range_noise_sigma=g("lidar", "range_noise", float, d.lidar.range_noise_sigma),
            rate=g("lidar", "rate", float, d.lidar.rate),
            mount_height=g("lidar", "mount_height", float, d.lidar.mount_height),
            distort=g("lidar", "distort", _bool, d.lidar.distort),
        )
        dr = DrModel(
            gyro_bias=math.radians(g("dr", "gyro_bias_deg_h", float, math.degrees(d.dr.gyro_bias) * 3600) / 3600),
            gyro_noise=math.radians(g("dr", "gyro_noise_deg_s", float, math.degrees(d.dr.gyro_noise))),
            accel_bias=g("dr", "accel_bias_ug", float, d.dr.accel_bias / 9.80665e-6) * 9.80665e-6,
            accel_noise=g("dr", "accel_noise_ug", float, d.dr.accel_noise / 9.80665e-6) * 9.80665e-6,
            speed_noise=g("dr", "speed_noise", float, d.dr.speed_noise),
            rate=g("dr", "rate", float, d.dr.rate),
        )
        gps = GpsModel(
            cep=g("gps", "cep", float, d.gps.cep),
            heading_sigma=math.radians(g("gps", "heading_sigma_deg", float, math.degrees(d.gps.heading_sigma))),
        )
        dl = d.localizer
        dn = dl.noise
        q_pos = g("localizer", "q_pos", float, math.sqrt(dn.Q[0, 0]))
        q_h = math.radians(g("localizer", "q_heading_deg", float, math.degrees(math.sqrt(dn.Q[2, 2]))))
        re_pos = g("localizer", "r_eta_pos", float, math.sqrt(dn.R_eta[0, 0]))
        re_h = math.radians(g("localizer", "r_eta_heading_deg", float, math.degrees(math.sqrt(dn.R_eta[2, 2]))))
        r_r = g("localizer", "r_range", float, math.sqrt(dn.R_rb[0, 0]))
        r_b = math.radians(g("localizer", "r_bearing_deg", float, math.degrees(math.sqrt(dn.R_rb[1, 1]))))
        noise = NoiseConfig(
            Q=np.diag([q_pos**2, q_pos**2, q_h**2]),
            R_eta=np.diag([re_pos**2, re_pos**2, re_h**2]),
            R_rb=np.diag([r_r**2, r_b**2]),
            range_sigma={
                kind: g("localizer", key, float, dn.range_sigma[kind]) for key, kind in _RANGE_KEYS.items()
            },
            gps_sigma=gps.sigma,
            gps_heading_sigma=gps.heading_sigma,
        )
        features = g("localizer", "features", parse_features, ALL_FEATURES)
        features = features - g("localizer", "ablate", parse_features, frozenset())
        maha = g("localizer", "lane_maha_gate", float, dl.lane_maha_gate)
        ext = dl.extraction
        loc = LocalizerConfig(
            noise=noise,
            extraction=replace(ext, wall_margin=g("localizer", "wall_margin", float, ext.wall_margin)),
            features=features,
            landmark_gate=g("localizer", "landmark_gate", float, dl.landmark_gate),
            lane_euclid_gate=g("localizer", "lane_euclid_gate", float, dl.lane_euclid_gate),
            lane_maha_gate=None if maha is not None and math.isinf(maha) else maha,
            ndt_max_iter=g("localizer", "ndt_max_iter", int, dl.ndt_max_iter),
            entry_error=g("localizer", "entry_error", _pair, dl.entry_error),
            corrections=g("localizer", "corrections", _bool, dl.corrections),
            eta_inflation=g("localizer", "eta_inflation", float, dl.eta_inflation),
        )
        th = Thresholds(
            lateral_rms=g("thresholds", "lateral_rms", float, d.thresholds.lateral_rms),
            longitudinal_rms=g("thresholds", "longitudinal_rms", float, d.thresholds.longitudinal_rms),
            mean_step_ms=g("thresholds", "mean_step_ms", float, d.thresholds.mean_step_ms),
            max_step_ms=g("thresholds", "max_step_ms", float, d.thresholds.max_step_ms),
        )
        origin = GeoOrigin(
            g("scenario", "origin_lat", float, d.origin.lat0),
            g("scenario", "origin_lon", float, d.origin.lon0),
        )
        return Scenario(
            tunnel=tunnel, route=route, lidar=lidar, dr=dr, gps=gps,
            occluder_density=g("traffic", "occluder_density", float, d.occluder_density),
            localizer=loc, seed=g("scenario", "seed", int, d.seed), origin=origin,
            thresholds=th, name=g("scenario", "name", str, d.name),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_config(cp)
