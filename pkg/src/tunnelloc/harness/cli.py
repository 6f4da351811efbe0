"""Command-line entry point: gen-map, simulate, run, replay, report."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..sim import World
from ..tunnel import build_maps
from .mapio import MapFormatError, write_landmark_map, write_lane_map
from .outputs import emit_outputs, read_trajectory_csv, summary_text
from .recording import RecordingError, read_frames, write_frames
from .runner import dr_only_track, frames_for, rms, run_frames, run_scenario, threshold_violations
from .scenario import Scenario, ScenarioError, load_scenario, parse_features

OUT_ENV = "TUNNELLOC_OUT"
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_THRESHOLD = 0, 1, 2, 3

log = logging.getLogger("tunnelloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tunnelloc", description="Tunnel facility-based vehicle localization workbench.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, record=False):
        sp.add_argument("--scenario", help="scenario config file (INI)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lane", type=int)
        sp.add_argument("--ablate", help="comma-separated facility kinds to disable")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")
        if record:
            sp.add_argument("--record", required=True, help="frame recording file")

    common(sub.add_parser("gen-map", help="write landmark and lane maps"))
    common(sub.add_parser("simulate", help="simulate a drive and record its frames"), record=True)
    r = sub.add_parser("run", help="simulate and localize, write outputs")
    common(r)
    r.add_argument("--assert-thresholds", action="store_true", help="exit 3 if a threshold is violated")
    rp = sub.add_parser("replay", help="localize a recorded drive")
    common(rp, record=True)
    rp.add_argument("--assert-thresholds", action="store_true")
    rep = sub.add_parser("report", help="summarize an output directory")
    rep.add_argument("--out", help="output directory holding trajectory.csv")
    return p


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "out").resolve()


def _inside(path: Path, root: Path) -> Path:
    path = (root / path).resolve() if not path.is_absolute() else path.resolve()
    if root != path and root not in path.parents:
        raise UsageError(f"{path} is outside the output directory {root}")
    return path


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else Scenario()
    ablate = parse_features(args.ablate) if getattr(args, "ablate", None) else None
    return sc.with_overrides(seed=args.seed, lane=args.lane, ablate=ablate)


def _finish(report, sc, out: Path, assert_thresholds: bool) -> int:
    emit_outputs(report, out)
    sys.stdout.write(summary_text(report))
    if assert_thresholds:
        bad = threshold_violations(report, sc)
        for b in bad:
            log.error("threshold violated: %s", b)
        if bad:
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_gen_map(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    lm, ln = build_maps(sc.tunnel, World.build(sc.tunnel, sc.seed).placement)
    write_landmark_map(out / "landmarks.csv", lm, sc.origin)
    write_lane_map(out / "lanes.csv", ln, sc.origin)
    size = (out / "landmarks.csv").stat().st_size + (out / "lanes.csv").stat().st_size
    print(f"landmarks: {len(lm)}  lane gaussians: {len(ln)}  total bytes: {size}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = _inside(Path(args.record), out)
    with open(path, "wb") as fh:
        n = write_frames(fh, frames_for(sc))
    print(f"recorded {n} frames to {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    return _finish(run_scenario(sc), sc, out, args.assert_thresholds)


def cmd_replay(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    path = Path(args.record)
    if not path.is_file():
        raise UsageError(f"recording not found: {path}")
    lm, ln = build_maps(sc.tunnel, World.build(sc.tunnel, sc.seed).placement)
    with open(path, "rb") as fh:
        frames = list(read_frames(fh))
    report = run_frames(sc, frames, lm, ln)
    report.dr_only = dr_only_track(sc, frames)
    return _finish(report, sc, out, args.assert_thresholds)


def cmd_report(args) -> int:
    out = _out_dir(args)
    csv_path = out / "trajectory.csv"
    if not csv_path.is_file():
        raise UsageError(f"no trajectory.csv in {out}")
    rows = read_trajectory_csv(csv_path)
    summary = out / "summary.txt"
    if summary.is_file():
        sys.stdout.write(summary.read_text())
    lat = np.array([r["err_lat_m"] for r in rows])
    lon = np.array([r["err_lon_m"] for r in rows])
    steps = np.array([r["step_ms"] for r in rows])
    print(f"all frames: {len(rows)}  rms_lateral_m: {rms(lat):.4f}  rms_longitudinal_m: {rms(lon):.4f}")
    print(f"step_ms mean: {steps.mean():.2f}  max: {steps.max():.2f}")
    return EXIT_OK


COMMANDS = {
    "gen-map": cmd_gen_map,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "replay": cmd_replay,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, MapFormatError, RecordingError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
