"""EKF pose tracker with entry-time lane/longitudinal compensation.

State is (x, y, psi) in the local plane. Outside the tunnel the filter fuses
GPS position fixes with dead reckoning; on entering it snaps the lateral
position to the detected lane, then the longitudinal position to the
overhead lane-control signs, and from there tracks with lane-marking NDT and
facility range/bearing updates.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .extraction import Extraction, ExtractionConfig, extract
from .geometry import Pose2D, global_to_vehicle, vehicle_to_global, wrap_angle
from .registration import NdtIllConditioned, associate_landmarks, ndt_match
from .tunnel import FacilityKind, LandmarkMap, LaneDistMap, TunnelSpec


class Mode(str, enum.Enum):
    GPS_DR = "GpsDr"
    ENTRY = "EntryCompensation"
    TRACKING = "TunnelTracking"


class SingularInnovation(RuntimeError):
    pass


class NoLampMatched(RuntimeError):
    pass


class NoLcsDetected(RuntimeError):
    pass


LANE_MARKING = "LaneMarking"


def _psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    w, v = np.linalg.eigh(cov)
    if w.min() < -1e-9:
        raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3g})")
    if w.min() < 0:
        cov = (v * np.maximum(w, 0.0)) @ v.T
    return cov


@dataclass(frozen=True)
class FilterState:
    mean: Pose2D
    cov: np.ndarray
    mode: Mode = Mode.GPS_DR

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        object.__setattr__(self, "cov", _psd(cov))


@dataclass(frozen=True)
class NoiseConfig:
    Q: np.ndarray = field(
        default_factory=lambda: np.diag([0.05**2, 0.05**2, math.radians(0.1) ** 2])
    )
    R_eta: np.ndarray = field(
        default_factory=lambda: np.diag([0.10**2, 0.10**2, math.radians(0.3) ** 2])
    )
    R_rb: np.ndarray = field(default_factory=lambda: np.diag([0.25**2, math.radians(1.0) ** 2]))
    gps_sigma: float = 2.5 / 1.1774
    gps_heading_sigma: float = math.radians(0.3)
    # range sigma per facility kind; kinds not listed use R_rb as is
    range_sigma: dict = field(
        default_factory=lambda: {"Lamp": 0.05, "ExitLight": 0.15, "LCS": 0.10, "ExitSign": 0.15}
    )

    def rb_base(self, kind) -> np.ndarray:
        """Range/bearing noise for one facility kind."""
        sig = self.range_sigma.get(getattr(kind, "value", kind))
        if sig is None:
            return self.R_rb
        return np.diag([sig**2, self.R_rb[1, 1]])

    def __post_init__(self):
        for k, v in self.range_sigma.items():
            if not v > 0:
                raise ValueError(f"range sigma for {k} must be positive")
        for name, shape in (("Q", (3, 3)), ("R_eta", (3, 3)), ("R_rb", (2, 2))):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != shape:
                raise ValueError(f"{name} must be {shape}")
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, m)


@dataclass
class MeasurementBundle:
    eta: Pose2D | None = None
    pairs: list = field(default_factory=list)  # (r, beta, landmark xy)
    R_eta: np.ndarray | None = None
    R_pairs: list | None = None  # optional per-pair 2x2 noise

    def __post_init__(self):
        for r, beta, _ in self.pairs:
            if not r > 0:
                raise ValueError("range must be positive")
        self.pairs = [(r, wrap_angle(b), np.asarray(m, dtype=float)) for r, b, m in self.pairs]

    def __len__(self):
        return len(self.pairs) + (self.eta is not None)


# ---------------------------------------------------------------- EKF core


def time_update(state: FilterState, v: float, yaw_rate: float, dt: float, Q) -> FilterState:
    if not (math.isfinite(v) and math.isfinite(yaw_rate) and math.isfinite(dt)):
        raise ValueError("non-finite time-update input")
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = state.mean
    mean = Pose2D(
        m.x + dt * v * math.cos(m.psi), m.y + dt * v * math.sin(m.psi), m.psi + dt * yaw_rate
    )
    F = np.eye(3)
    return FilterState(mean, F @ state.cov @ F.T + np.asarray(Q), state.mode)


def predict_measurement(pose: Pose2D, landmark) -> tuple[float, float]:
    dx = landmark[0] - pose.x
    dy = landmark[1] - pose.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        raise ValueError("landmark coincides with the vehicle position")
    return r, wrap_angle(math.atan2(dy, dx) - pose.psi)


def measurement_jacobian(pose: Pose2D, landmark) -> np.ndarray:
    """Rows [A B 0; C D -1] of the range/bearing model."""
    dx = landmark[0] - pose.x
    dy = landmark[1] - pose.y
    r2 = dx * dx + dy * dy
    r = math.sqrt(r2)
    return np.array([[-dx / r, -dy / r, 0.0], [dy / r2, -dx / r2, -1.0]])


def range_bearing_noise(r: float, base: np.ndarray, min_range: float = 5.0) -> np.ndarray:
    """Per-landmark noise: bearing variance from a fixed position spread at range ``r``."""
    sigma_p = math.sqrt(base[0, 0])
    return np.diag([base[0, 0], max(base[1, 1], (sigma_p / max(r, min_range)) ** 2)])


def measurement_update(
    state: FilterState, bundle: MeasurementBundle, noise: NoiseConfig, diagnostics: dict | None = None
) -> FilterState:
    """Stacked EKF update with the pose pseudo-measurement and landmark pairs."""
    if len(bundle) == 0:
        return state
    pose = state.mean
    rows, innov, blocks = [], [], []
    if bundle.eta is not None:
        rows.append(np.eye(3))
        d = bundle.eta.as_array() - pose.as_array()
        d[2] = wrap_angle(d[2])
        innov.append(d)
        blocks.append(noise.R_eta if bundle.R_eta is None else np.asarray(bundle.R_eta))
    for i, (r, beta, m) in enumerate(bundle.pairs):
        r_hat, b_hat = predict_measurement(pose, m)
        rows.append(measurement_jacobian(pose, m))
        innov.append(np.array([r - r_hat, wrap_angle(beta - b_hat)]))
        blocks.append(noise.R_rb if bundle.R_pairs is None else np.asarray(bundle.R_pairs[i]))
    H = np.vstack(rows)
    y = np.concatenate(innov)
    n = H.shape[0]
    R = np.zeros((n, n))
    k = 0
    for b in blocks:
        R[k : k + b.shape[0], k : k + b.shape[0]] = b
        k += b.shape[0]
    P = state.cov
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
        if diagnostics is not None:
            diagnostics["error"] = "SingularInnovation"
        return state
    K = np.linalg.solve(S, H @ P).T
    dx = K @ y
    IKH = np.eye(3) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    mean = Pose2D.from_array(pose.as_array() + dx)
    if diagnostics is not None:
        diagnostics["nis"] = float(y @ np.linalg.solve(S, y))
        diagnostics["rows"] = n
    return FilterState(mean, P_new, state.mode)


def position_update(state: FilterState, fix, sigma: float) -> FilterState:
    """Plain GPS position fix."""
    H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    P = state.cov
    S = H @ P @ H.T + sigma**2 * np.eye(2)
    K = np.linalg.solve(S, H @ P).T
    y = np.asarray(fix, dtype=float) - state.mean.xy
    IKH = np.eye(3) - K @ H
    P_new = IKH @ P @ IKH.T + sigma**2 * K @ K.T
    return FilterState(Pose2D.from_array(state.mean.as_array() + K @ y), P_new, state.mode)


def eta_noise(hessian: np.ndarray | None, base: np.ndarray, degenerate_ratio: float = 1e-3, inflation: float = 100.0):
    """Pose pseudo-measurement noise shaped by the NDT Hessian.

    Position variance along each Hessian eigenvector is the base variance
    scaled by the conditioning (largest/own eigenvalue, capped at
    ``inflation``); a direction whose eigenvalue ratio falls below
    ``degenerate_ratio`` gets the full inflation.
    """
    if hessian is None:
        return base
    info = -0.5 * (hessian[:2, :2] + hessian[:2, :2].T)
    w, V = np.linalg.eigh(info)
    top = max(w.max(), 1e-12)
    ratio = np.clip(w, 0.0, None) / top
    scale = np.where(ratio < degenerate_ratio, inflation, np.minimum(1.0 / np.maximum(ratio, 1e-12), inflation))
    var = base[0, 0] * scale
    R = base.copy()
    R[:2, :2] = (V * var) @ V.T
    R[:2, 2] = R[2, :2] = 0.0
    return R


# ---------------------------------------------------------------- entry compensation


def _vehicle_frame(v, psi):
    return global_to_vehicle(np.asarray(v, dtype=float), psi)


def compensate_lateral(
    state: FilterState, lane: int, lamp_xy, spec: TunnelSpec, reset_sigma: float = 0.3
) -> FilterState:
    """Snap the lateral position to the lane centre, using a matched map lamp as the reference station."""
    if lamp_xy is None:
        raise NoLampMatched("no lamp matched to the map")
    psi = state.mean.psi
    p_map = np.asarray(lamp_xy, dtype=float)
    cl = spec.centerline
    s_lamp = float(cl.project(p_map[None, :])[0][0])
    p_cl = cl.to_global(np.array([s_lamp]), np.array([spec.lane_center(lane)]))[0]
    lat_dr = _vehicle_frame(p_map - state.mean.xy, psi)[0]
    lat_cl = _vehicle_frame(p_map - p_cl, psi)[0]
    delta = vehicle_to_global(np.array([lat_dr - lat_cl, 0.0]), psi)
    mean = Pose2D(state.mean.x + delta[0], state.mean.y + delta[1], psi)
    return FilterState(mean, _reset_block(state.cov, psi, 0, reset_sigma), state.mode)


def compensate_longitudinal(
    state: FilterState, lcs_pairs, reset_sigma: float = 0.5
) -> FilterState:
    """Shift along the heading by the mean longitudinal LCS discrepancy.

    ``lcs_pairs`` holds (vehicle-frame detection centre, map position) tuples.
    """
    if not lcs_pairs:
        raise NoLcsDetected("no LCS detected")
    psi = state.mean.psi
    diffs = []
    for det_v, p_map in lcs_pairs:
        expected = _vehicle_frame(np.asarray(p_map, dtype=float) - state.mean.xy, psi)
        diffs.append(expected[1] - float(det_v[1]))
    delta = vehicle_to_global(np.array([0.0, float(np.mean(diffs))]), psi)
    mean = Pose2D(state.mean.x + delta[0], state.mean.y + delta[1], psi)
    return FilterState(mean, _reset_block(state.cov, psi, 1, reset_sigma), state.mode)


def _reset_block(cov: np.ndarray, psi: float, axis: int, sigma: float) -> np.ndarray:
    """Replace the variance along one vehicle axis (0 lateral, 1 longitudinal), dropping its correlations."""
    c, s = math.cos(psi - 0.5 * math.pi), math.sin(psi - 0.5 * math.pi)
    Rv = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    Pv = Rv.T @ cov @ Rv
    Pv[axis, :] = 0.0
    Pv[:, axis] = 0.0
    Pv[axis, axis] = sigma**2
    return Rv @ Pv @ Rv.T


# ---------------------------------------------------------------- orchestration


ALL_FEATURES = frozenset({*(k.value for k in FacilityKind if k.usable), LANE_MARKING})


@dataclass(frozen=True)
class LocalizerConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    features: frozenset = ALL_FEATURES
    landmark_gate: float = 3.0
    lane_euclid_gate: float = 2.0
    lane_maha_gate: float | None = 3.0
    ndt_max_iter: int = 20
    entry_lamp_gate: float = 10.0
    entry_lcs_gate: float = 5.0
    lateral_reset_sigma: float = 0.3
    longitudinal_reset_sigma: float = 0.5
    degenerate_ratio: float = 1e-3
    eta_inflation: float = 100.0
    entry_error: tuple[float, float] | None = None  # injected (lateral, longitudinal) at entry
    corrections: bool = True
    # flush wall units are sampled too sparsely at grazing incidence beyond this range
    flush_max_range: float = 18.0

    def __post_init__(self):
        feats = frozenset(str(f) for f in self.features)
        unknown = feats - ALL_FEATURES
        if unknown:
            raise ValueError(f"unknown features: {sorted(unknown)}")
        if FacilityKind.LAMP.value not in feats:
            raise ValueError("the fire-extinguisher lamp cannot be ablated")
        object.__setattr__(self, "features", feats)

    def uses(self, kind) -> bool:
        return (kind.value if isinstance(kind, FacilityKind) else kind) in self.features


@dataclass
class StepDiagnostics:
    t: float
    mode: Mode
    detections: dict = field(default_factory=dict)
    matched: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    ndt_points: int = 0
    events: list = field(default_factory=list)
    error: str | None = None
    step_ms: float = 0.0
    extraction: Extraction | None = None


class Localizer:
    """Sequential state machine; feed frames in time order through :meth:`step`."""

    def __init__(
        self,
        spec: TunnelSpec,
        landmarks: LandmarkMap,
        lanes: LaneDistMap,
        config: LocalizerConfig = LocalizerConfig(),
        initial: FilterState | None = None,
    ):
        self.spec = spec
        self.config = config
        self.landmarks = landmarks.restricted(
            k for k in FacilityKind if k.usable and config.uses(k)
        )
        self.lanes = lanes
        self.state = initial
        self.prev_t: float | None = None
        self._lateral_done = False
        self._entry_state: FilterState | None = None

    @property
    def entry_residual_state(self) -> FilterState | None:
        """State at the moment entry compensation finished."""
        return self._entry_state

    def _init(self, frame) -> FilterState:
        n = self.config.noise
        if frame.gps is not None:
            psi = frame.gps_heading if frame.gps_heading is not None else frame.truth.psi
            mean = Pose2D(frame.gps[0], frame.gps[1], psi)
        else:
            mean = frame.truth
        cov = np.diag([n.gps_sigma**2, n.gps_sigma**2, n.gps_heading_sigma**2])
        return FilterState(mean, cov, Mode.GPS_DR)

    def step(self, frame, extraction: Extraction | None = None) -> tuple[FilterState, StepDiagnostics]:
        """Advance one frame. ``extraction`` may be supplied precomputed for this frame's scan."""
        t_start = time.perf_counter()
        cfg = self.config
        diag = StepDiagnostics(frame.t, Mode.GPS_DR)
        if self.state is None:
            self.state = self._init(frame)
        else:
            dt = frame.t - self.prev_t
            self.state = time_update(self.state, frame.dr_speed, frame.dr_yaw_rate, dt, cfg.noise.Q)
        self.prev_t = frame.t
        st = self.state

        if not cfg.corrections:
            if frame.gps is not None and st.mode is Mode.GPS_DR:
                st = position_update(st, frame.gps, cfg.noise.gps_sigma)
            self.state = st
            diag.mode = st.mode
            diag.step_ms = 1e3 * (time.perf_counter() - t_start)
            return st, diag

        if st.mode is not Mode.GPS_DR and frame.gps is not None:
            st = replace(st, mode=Mode.GPS_DR)
            diag.events.append("exit")

        if st.mode is Mode.GPS_DR:
            if frame.gps is not None:
                st = position_update(st, frame.gps, cfg.noise.gps_sigma)
            else:
                ex = self._extract(frame, extraction, diag)
                if ex.walls_visible:
                    st = replace(st, mode=Mode.ENTRY)
                    self._lateral_done = False
                    diag.events.append("entry")
                    if cfg.entry_error is not None:
                        lat, lon = cfg.entry_error
                        off = vehicle_to_global(np.array([lat, lon]), st.mean.psi)
                        st = replace(st, mean=Pose2D(st.mean.x + off[0], st.mean.y + off[1], st.mean.psi))
                    st = self._compensate(st, ex, diag)
                extraction = ex
        elif st.mode is Mode.ENTRY:
            ex = self._extract(frame, extraction, diag)
            st = self._compensate(st, ex, diag)
        else:
            ex = self._extract(frame, extraction, diag)
            st = self._track(st, ex, diag)

        self.state = st
        diag.mode = st.mode
        diag.step_ms = 1e3 * (time.perf_counter() - t_start)
        return st, diag

    def _extract(self, frame, extraction, diag) -> Extraction:
        t0 = time.perf_counter()
        ex = extraction if extraction is not None else extract(frame.scan, self.spec, self.config.extraction)
        diag.timings["extract_ms"] = 1e3 * (time.perf_counter() - t0)
        diag.extraction = ex
        diag.timings.update(ex.timings)
        for k in FacilityKind:
            if k.usable:
                diag.detections[k.value] = ex.count(k)
        if ex.error:
            diag.error = ex.error
        return ex

    def _match(self, st: FilterState, ex: Extraction, kinds, gate: float):
        dets = [d for d in ex.detections if d.kind in kinds and self.config.uses(d.kind)]
        if not dets:
            return []
        g = st.mean.to_global(np.array([d.position[:2] for d in dets]))
        assoc = associate_landmarks([d.kind for d in dets], g, self.landmarks, gate)
        return [(dets[i], self.landmarks.positions[j]) for i, j in assoc.pairs]

    def _compensate(self, st: FilterState, ex: Extraction, diag) -> FilterState:
        cfg = self.config
        if not ex.walls_visible:
            return st
        if not self._lateral_done:
            pairs = self._match(st, ex, {FacilityKind.LAMP}, cfg.entry_lamp_gate)
            if not pairs:
                diag.events.append("lateral-deferred")
                return st
            det, p_map = min(pairs, key=lambda p: float(np.hypot(*p[0].position[:2])))
            lane = ex.lane
            st = compensate_lateral(st, lane, p_map, self.spec, cfg.lateral_reset_sigma)
            self._lateral_done = True
            diag.events.append(f"lateral lane={lane}")
        if not cfg.uses(FacilityKind.LCS):
            st = replace(st, mode=Mode.TRACKING)
            self._entry_state = st
            return st
        pairs = self._match(st, ex, {FacilityKind.LCS}, cfg.entry_lcs_gate)
        if not pairs:
            diag.events.append("longitudinal-deferred")
            return st
        st = compensate_longitudinal(
            st, [(d.position, p) for d, p in pairs], cfg.longitudinal_reset_sigma
        )
        st = replace(st, mode=Mode.TRACKING)
        self._entry_state = st
        diag.events.append(f"longitudinal n={len(pairs)}")
        return st

    def _track(self, st: FilterState, ex: Extraction, diag) -> FilterState:
        cfg = self.config
        t0 = time.perf_counter()
        eta, R_eta = None, None
        if cfg.uses(LANE_MARKING) and ex.lane_points.shape[0] > 0:
            try:
                corr = ndt_match(
                    ex.lane_points, self.lanes, st.mean, cfg.ndt_max_iter,
                    cfg.lane_euclid_gate, cfg.lane_maha_gate,
                )
            except NdtIllConditioned as exc:
                corr = None
                diag.error = f"NdtIllConditioned: {exc}"
            # an unconverged result has only crept along the weak direction, which R_eta discounts
            if corr is not None and corr.hessian is not None:
                eta = Pose2D(st.mean.x + corr.dx, st.mean.y + corr.dy, st.mean.psi + corr.dpsi)
                R_eta = eta_noise(corr.hessian, cfg.noise.R_eta, cfg.degenerate_ratio, cfg.eta_inflation)
                diag.ndt_points = corr.n_points
        t1 = time.perf_counter()
        diag.timings["ndt_ms"] = 1e3 * (t1 - t0)
        kinds = {k for k in FacilityKind if k.usable}
        pairs = self._match(st, ex, kinds, cfg.landmark_gate)
        rb, R_pairs = [], []
        for det, p_map in pairs:
            x_v, y_v = float(det.position[0]), float(det.position[1])
            r = math.hypot(x_v, y_v)
            if r <= 0 or (det.kind is FacilityKind.EXIT_LIGHT and r > cfg.flush_max_range):
                continue
            rb.append((r, math.atan2(-x_v, y_v), p_map))
            R_pairs.append(range_bearing_noise(r, cfg.noise.rb_base(det.kind)))
            diag.matched[det.kind.value] = diag.matched.get(det.kind.value, 0) + 1
        bundle = MeasurementBundle(eta, rb, R_eta, R_pairs)
        upd = {}
        st = measurement_update(st, bundle, cfg.noise, upd)
        if "error" in upd:
            diag.error = upd["error"]
        diag.timings["update_ms"] = 1e3 * (time.perf_counter() - t1)
        return st
