"""Trajectory CSV, text summary and static SVG plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import KIND_ORDER, RunReport, detection_table  # noqa: E402

CSV_HEADER = [
    "t_s", "truth_x_m", "truth_y_m", "truth_psi_rad", "est_x_m", "est_y_m", "est_psi_rad",
    "err_lat_m", "err_lon_m", "n_lamp", "n_exitlight", "n_lcs", "n_exitsign", "step_ms",
]

_SVG_RC = {"svg.hashsalt": "tunnelloc", "svg.fonttype": "none", "path.simplify": False}


def trajectory_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.records:
        d = r.detections
        w.writerow(
            [f"{r.t:.3f}", f"{r.truth.x:.4f}", f"{r.truth.y:.4f}", f"{r.truth.psi:.6f}",
             f"{r.estimate.x:.4f}", f"{r.estimate.y:.4f}", f"{r.estimate.psi:.6f}",
             f"{r.err_lat:.4f}", f"{r.err_lon:.4f}"]
            + [int(d.get(k.value, 0)) for k in KIND_ORDER]
            + [f"{r.step_ms:.3f}"]
        )
    return buf.getvalue()


def summary_text(report: RunReport) -> str:
    s = report.summary()
    lines = [f"scenario: {report.scenario}", f"seed: {report.seed}", f"lane: {report.lane}"]
    for k, v in s.items():
        lines.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    if report.entry_error is not None:
        lines.append(f"entry_residual_lateral_m: {report.entry_error[0]:.4f}")
        lines.append(f"entry_residual_longitudinal_m: {report.entry_error[1]:.4f}")
    table = detection_table(report)
    lines.append("detection rate (% of tunnel scans):")
    for k in ("N>=1", "N>=2", "N>=3"):
        lines.append(f"  {k}: {table[k]:.1f}")
    lines.append("detection share (% of facility points):")
    for k, v in table["share"].items():
        lines.append(f"  {k}: {v:.1f}")
    return "\n".join(lines) + "\n"


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _plot_trajectory(report: RunReport, path: Path) -> None:
    truth = np.array([r.truth.as_array()[:2] for r in report.records])
    est = np.array([r.estimate.as_array()[:2] for r in report.records])
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(truth[:, 0], truth[:, 1], "k-", lw=1.0, label="truth")
    if report.dr_only:
        dr = np.array([p.as_array()[:2] for p in report.dr_only])
        ax.plot(dr[:, 0], dr[:, 1], "r--", lw=1.0, label="DR only")
    ax.plot(est[:, 0], est[:, 1], "b-", lw=1.0, label="corrected")
    ax.set_xlabel("east (m)")
    ax.set_ylabel("north (m)")
    ax.legend(loc="best")
    _save_svg(fig, path)


def _plot_errors(report: RunReport, path: Path) -> None:
    s = np.array([r.truth_s for r in report.records])
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(s, [r.err_lat for r in report.records], lw=1.0, label="lateral")
    ax.plot(s, [r.err_lon for r in report.records], lw=1.0, label="longitudinal")
    ax.set_xlabel("distance along tunnel (m)")
    ax.set_ylabel("error (m)")
    ax.legend(loc="best")
    _save_svg(fig, path)


def _plot_timing(report: RunReport, path: Path) -> None:
    ms = [r.step_ms for r in report.tunnel_records()]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ms, bins=30)
    ax.set_xlabel("step time (ms)")
    ax.set_ylabel("frames")
    _save_svg(fig, path)


def emit_outputs(report: RunReport, out_dir) -> dict[str, Path]:
    """Write every artifact; returns name -> path. Failures are collected per file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, errors = {}, []
    jobs = {
        "trajectory.csv": lambda p: p.write_text(trajectory_csv(report)),
        "summary.txt": lambda p: p.write_text(summary_text(report)),
        "trajectory.svg": lambda p: _plot_trajectory(report, p),
        "errors.svg": lambda p: _plot_errors(report, p),
        "timing.svg": lambda p: _plot_timing(report, p),
    }
    with plt.rc_context(_SVG_RC):
        for name, job in jobs.items():
            path = out / name
            try:
                job(path)
                written[name] = path
            except OSError as exc:
                errors.append(f"{name}: {exc}")
    if errors:
        raise OSError("; ".join(errors))
    return written


def read_trajectory_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [{k: float(v) for k, v in row.items()} for row in rd]
