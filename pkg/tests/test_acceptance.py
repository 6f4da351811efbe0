"""End-to-end acceptance campaign.

Each criterion prints one PASS/FAIL line with its measured numbers. The
full-scenario runs (3 lanes x seeds 1-5) are shared through a module fixture;
expect the module to take about ten minutes on one core.
"""

import subprocess
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest

from tunnelloc.harness.mapio import write_landmark_map, write_lane_map
from tunnelloc.harness.runner import KIND_ORDER, detection_table, dr_only_track, frames_for, run_frames
from tunnelloc.harness.scenario import Scenario, parse_features
from tunnelloc.sim import Route, World
from tunnelloc.tunnel import build_maps

LANES = (1, 2, 3)
SEEDS = (1, 2, 3, 4, 5)
ABLATION_LANE = 2

# feature sets compared with the lamp-only baseline
LAMP_ONLY = "ExitLight,LCS,ExitSign,LaneMarking"
ADDITIONS = {
    "+LCS/exit sign": "ExitLight,LaneMarking",
    "+exit light": "LCS,ExitSign,LaneMarking",
    "+lane marking": "ExitLight,LCS,ExitSign",
}

ENTRY_ERRORS = [(0.26, 0.21), (3.57, 0.25), (2.02, -0.12)]
ENTRY_SEEDS = range(1, 11)


@dataclass
class RunResult:
    lane: int
    seed: int
    seconds: float
    summary: dict
    table: dict


def verdict(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")


def _ablation_rms(scenario, world, landmarks, lanes, cache):
    frames = list(frames_for(scenario, with_scans=False, world=World.build(scenario.tunnel, scenario.seed)))
    out = {}
    for name, ablate in {"lamp only": LAMP_ONLY, **ADDITIONS}.items():
        sc = scenario.with_overrides(ablate=parse_features(ablate))
        s = run_frames(sc, frames, landmarks, lanes, extractions=cache).summary()
        out[name] = (s["rms_lateral_m"], s["rms_longitudinal_m"])
    return out


@pytest.fixture(scope="module")
def campaign():
    runs, ablation = [], {}
    for lane in LANES:
        for seed in SEEDS:
            sc = Scenario().with_overrides(seed=seed, lane=lane)
            world = World.build(sc.tunnel, seed)
            landmarks, lanes = build_maps(sc.tunnel, world.placement)
            cache = {} if lane == ABLATION_LANE else None
            t0 = time.perf_counter()
            rep = run_frames(sc, frames_for(sc, True, world), landmarks, lanes, keep_extractions=cache)
            seconds = time.perf_counter() - t0
            rep.dr_only = dr_only_track(sc, frames_for(sc, False, World.build(sc.tunnel, seed)))
            runs.append(RunResult(lane, seed, seconds, rep.summary(), detection_table(rep)))
            if cache is not None:
                ablation[seed] = _ablation_rms(sc, world, landmarks, lanes, cache)
    return runs, ablation


def test_c1_end_to_end_accuracy(campaign, capsys):
    runs, _ = campaign
    lat = max(r.summary["rms_lateral_m"] for r in runs)
    lon = max(r.summary["rms_longitudinal_m"] for r in runs)
    slow = max(r.seconds for r in runs)
    ok = lat <= 0.15 and lon <= 0.30 and slow <= 60.0
    verdict(
        capsys, "C1 end-to-end accuracy", ok,
        f"worst lateral RMS {lat:.4f} m (<= 0.15), worst longitudinal RMS {lon:.4f} m (<= 0.30), "
        f"slowest run {slow:.1f} s (<= 60) over {len(runs)} runs",
    )
    assert ok


def test_c2_drift_correction(campaign, capsys):
    runs, _ = campaign
    ratios = [r.summary["dr_terminal_error_m"] / max(r.summary["terminal_error_m"], 1e-9) for r in runs]
    worst = int(np.argmin(ratios))
    ok = min(ratios) >= 5.0
    r = runs[worst]
    verdict(
        capsys, "C2 drift correction", ok,
        f"min DR/corrected terminal ratio {min(ratios):.1f} (>= 5) at lane {r.lane} seed {r.seed} "
        f"({r.summary['dr_terminal_error_m']:.3f} m vs {r.summary['terminal_error_m']:.4f} m)",
    )
    assert ok


def test_c3_entry_compensation(capsys):
    failures, worst_lat, worst_lon = [], 0.0, 0.0
    for lat, lon in ENTRY_ERRORS:
        for seed in ENTRY_SEEDS:
            lane = 1 + seed % 3
            base = Scenario(route=Route(lane=lane, start_s=-30.0, end_s=60.0))
            sc = base.with_overrides(seed=seed)
            sc = replace(sc, localizer=replace(sc.localizer, entry_error=(lat, lon)))
            rep = run_frames(sc, frames_for(sc))
            if rep.entry_error is None:
                failures.append(f"({lat}, {lon}) seed {seed}: tracking never began")
                continue
            el, eo = abs(rep.entry_error[0]), abs(rep.entry_error[1])
            worst_lat, worst_lon = max(worst_lat, el), max(worst_lon, eo)
            if el > 0.3 or eo > 0.5:
                failures.append(f"({lat}, {lon}) seed {seed}: residual ({el:.3f}, {eo:.3f})")
    ok = not failures
    n = len(ENTRY_ERRORS) * len(ENTRY_SEEDS)
    verdict(
        capsys, "C3 entry compensation", ok,
        f"{n - len(failures)}/{n} cases within 0.3 m / 0.5 m; worst residual lateral {worst_lat:.3f} m, "
        f"longitudinal {worst_lon:.3f} m" + ("; " + "; ".join(failures) if failures else ""),
    )
    assert ok


def test_c4_timing(campaign, capsys):
    runs, _ = campaign
    mean = max(r.summary["mean_step_ms"] for r in runs)
    peak = max(r.summary["max_step_ms"] for r in runs)
    ok = mean <= 100.0 and peak <= 200.0
    verdict(capsys, "C4 timing", ok, f"worst per-run mean step {mean:.1f} ms (<= 100), max step {peak:.1f} ms (<= 200)")
    assert ok


def test_c5_detection(campaign, capsys):
    runs, _ = campaign
    parts, ok = [], True
    for lane in LANES:
        lr = [r for r in runs if r.lane == lane]
        n1 = min(r.table["N>=1"] for r in lr)
        share = {k.value: np.mean([r.table["share"][k.value] for r in lr]) for k in KIND_ORDER}
        vals = [share[k.value] for k in KIND_ORDER]
        ordered = all(a > b for a, b in zip(vals, vals[1:]))
        ok &= n1 >= 85.0 and ordered
        parts.append(f"lane {lane}: min N>=1 {n1:.1f}% shares " + "/".join(f"{v:.1f}" for v in vals))
    verdict(capsys, "C5 detection", ok, "; ".join(parts) + " (lamp/exit light/LCS/exit sign)")
    assert ok


def test_c6_map_size(tmp_path, capsys):
    sc = Scenario()
    landmarks, lanes = build_maps(sc.tunnel, World.build(sc.tunnel, sc.seed).placement)
    write_landmark_map(tmp_path / "landmarks.csv", landmarks, sc.origin)
    write_lane_map(tmp_path / "lanes.csv", lanes, sc.origin)
    size = sum(p.stat().st_size for p in tmp_path.iterdir())
    ok = size <= 120_000
    verdict(capsys, "C6 map size", ok, f"{size} bytes for {len(landmarks)} landmarks + {len(lanes)} lane gaussians (<= 120000)")
    assert ok


KERNEL_SUITES = [
    "tests/test_registration.py::TestNdt::test_gradient_and_hessian_match_finite_differences",
    "tests/test_registration.py::TestIcp::test_recovers_inverse",
    "tests/test_registration.py::TestIcp::test_identity_in_one_iteration",
    "tests/test_localizer.py::TestMeasurementModel::test_jacobian_matches_finite_differences",
    "tests/test_extraction.py::TestRemoveWall::test_matches_brute_force",
    "tests/test_extraction.py::TestRemoveWall::test_matches_brute_force_near_threshold",
    "tests/test_registration.py::TestAssociateLane::test_matches_brute_force",
    "tests/test_registration.py::TestAssociateLandmarks::test_greedy_is_optimal_on_small_instances",
    "tests/test_localizer.py::test_nees_consistent_under_matched_noise",
]


def test_c7_kernel_suites(capsys):
    root = Path(__file__).resolve().parents[1]
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *KERNEL_SUITES],
        cwd=root, capture_output=True, text=True,
    )
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = proc.returncode == 0
    verdict(capsys, "C7 kernel property suites", ok, tail)
    assert ok, proc.stdout[-3000:]


def test_c8_ablation_direction(campaign, capsys):
    _, ablation = campaign
    violations, rows = [], []
    for seed, res in sorted(ablation.items()):
        base = res["lamp only"][1]
        rows.append(f"seed {seed}: lamp only {base:.4f}, " + ", ".join(f"{k} {res[k][1]:.4f}" for k in ADDITIONS))
        for k in ADDITIONS:
            if not res[k][1] < base:
                violations.append(f"seed {seed} {k}")
    ok = not violations
    n = len(ablation) * len(ADDITIONS)
    detail = f"{n - len(violations)}/{n} additions lower longitudinal RMS (m); " + "; ".join(rows)
    if violations:
        detail += "; not strictly lower: " + ", ".join(violations)
    verdict(capsys, "C8 ablation direction", ok, detail)
    assert ok
