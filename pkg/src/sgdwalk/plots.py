"""Deterministic SVG renderings of run artifacts.

Every renderer is a pure function of one CSV file's content: no clocks, no
randomness, no environment lookups. SVG output pins the hash salt and strips
the creation date so the same CSV bytes always produce the same SVG bytes.
Malformed input raises PlotDataError naming the file and line.
"""

import csv
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .curvature import CURVATURE_HEADER
from .interpolate import INTERP_HEADER
from .metrics import EPOCHS_HEADER, TRAJECTORY_HEADER
from .quadratic import RATES_HEADER
from .recipes import COSINE_STUDY_HEADER, SCHEDULES_HEADER

HASH_SALT = "sgd-walk"


class PlotDataError(ValueError):
    """A CSV file does not match the schema its name promises."""


def _read_csv(path, expected_header):
    path = Path(path)
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise PlotDataError(f"{path}: empty file")
    if rows[0] != list(expected_header):
        raise PlotDataError(
            f"{path}:1: header {rows[0]!r} does not match {list(expected_header)!r}")
    for index, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected_header):
            raise PlotDataError(
                f"{path}:{index}: {len(row)} fields, expected {len(expected_header)}")
    if len(rows) == 1:
        raise PlotDataError(f"{path}: no data rows")
    return rows[1:]


def _num(path, line, field, value):
    try:
        return float(value)
    except ValueError as exc:
        raise PlotDataError(f"{path}:{line}: bad {field} value {value!r}") from exc


def _opt(path, line, field, value):
    if value == "":
        return None
    return _num(path, line, field, value)


def _figure():
    return Figure(figsize=(7.0, 4.2), constrained_layout=True)


def _save(fig, out_path):
    with matplotlib.rc_context({"svg.hashsalt": HASH_SALT}):
        fig.savefig(out_path, format="svg", metadata={"Date": None})
    return Path(out_path)


def interp_geometry(path):
    """Parse interp.csv into ribbon points, floor vertices, boundaries.

    Returns (xs, ys, floor_x, floor_y, boundaries) where xs/ys contain NaN
    separators between non-adjacent slices and the floor polyline has one
    vertex per slice (the interior minimum).
    """
    rows = _read_csv(path, INTERP_HEADER)
    groups = []
    for line, row in enumerate(rows, start=2):
        t = int(_num(path, line, "t", row[0]))
        alpha = _num(path, line, "alpha", row[1])
        loss = _num(path, line, "loss", row[2])
        if groups and groups[-1][0] == t:
            groups[-1][1].append((alpha, loss))
        else:
            groups.append((t, [(alpha, loss)]))
    xs, ys = [], []
    floor_x, floor_y = [], []
    boundaries = []
    prev_t = None
    for t, pts in groups:
        if len(pts) < 3:
            raise PlotDataError(f"{path}: slice t={t} has {len(pts)} points")
        if prev_t is not None and t != prev_t + 1:
            xs.append(np.nan)
            ys.append(np.nan)
        for alpha, loss in pts:
            xs.append(t + alpha)
            ys.append(loss)
        interior = pts[1:-1]
        best = min(range(len(interior)), key=lambda i: interior[i][1])
        floor_x.append(t + interior[best][0])
        floor_y.append(interior[best][1])
        boundaries.append(t)
        prev_t = t
    boundaries.append(groups[-1][0] + 1)
    return xs, ys, floor_x, floor_y, boundaries


def render_interp(path, out_dir):
    xs, ys, floor_x, floor_y, boundaries = interp_geometry(path)
    fig = _figure()
    ax = fig.add_subplot()
    if len(boundaries) <= 130:
        for b in boundaries:
            ax.axvline(b, color="0.85", linewidth=0.6, zorder=0)
    ax.plot(xs, ys, color="tab:blue", linewidth=1.0, label="interpolated loss")
    ax.plot(floor_x, floor_y, color="tab:orange", linestyle="--",
            linewidth=1.2, marker=".", markersize=4, label="valley floor")
    ax.set_xlabel("iteration + alpha")
    ax.set_ylabel("loss")
    ax.legend(loc="best")
    return [_save(fig, Path(out_dir) / "interp.svg")]


def render_trajectory(path, out_dir):
    rows = _read_csv(path, TRAJECTORY_HEADER)
    t = []
    mini, full, cos, dist, norm = [], [], [], [], []
    for line, row in enumerate(rows, start=2):
        t.append(_num(path, line, "t", row[0]))
        mini.append(_num(path, line, "minibatch_loss", row[1]))
        full.append(_opt(path, line, "full_loss", row[2]))
        cos.append(_opt(path, line, "cosine", row[4]))
        dist.append(_num(path, line, "dist_init", row[5]))
        norm.append(_num(path, line, "param_norm", row[6]))
    out_dir = Path(out_dir)
    written = []

    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(t, mini, color="tab:blue", linewidth=1.0, label="minibatch loss")
    full_t = [tt for tt, v in zip(t, full) if v is not None]
    full_v = [v for v in full if v is not None]
    if full_v:
        ax.plot(full_t, full_v, "o-", color="tab:red", markersize=3,
                linewidth=0.8, label="full loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="best")
    written.append(_save(fig, out_dir / "loss.svg"))

    fig = _figure()
    ax = fig.add_subplot()
    cos_t = [tt for tt, v in zip(t, cos) if v is not None]
    cos_v = [v for v in cos if v is not None]
    ax.plot(cos_t, cos_v, color="tab:green", linewidth=0.9)
    ax.axhline(0.0, color="0.6", linewidth=0.6, linestyle=":")
    ax.axhline(-1.0, color="0.6", linewidth=0.6, linestyle=":")
    ax.set_ylim(-1.05, 1.05)
    ax.set_xlabel("iteration")
    ax.set_ylabel("gradient cosine")
    written.append(_save(fig, out_dir / "cosine.svg"))

    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(t, dist, color="tab:purple", linewidth=1.0, label="distance from init")
    ax.plot(t, norm, color="tab:gray", linewidth=1.0, label="parameter norm")
    ax.set_xlabel("iteration")
    ax.set_ylabel("l2")
    ax.legend(loc="best")
    written.append(_save(fig, out_dir / "distance.svg"))
    return written


def render_epochs(path, out_dir):
    rows = _read_csv(path, EPOCHS_HEADER)
    epoch, mean_h, sem, barriers, significant = [], [], [], [], []
    for line, row in enumerate(rows, start=2):
        epoch.append(_num(path, line, "epoch", row[0]))
        mean_h.append(_num(path, line, "mean_height", row[1]))
        sem.append(_num(path, line, "height_sem", row[2]))
        barriers.append(_num(path, line, "barrier_count", row[3]))
        significant.append(_num(path, line, "significant_barrier_count", row[4]))
    fig = Figure(figsize=(7.0, 5.6), constrained_layout=True)
    top, bottom = fig.subplots(2, 1, sharex=True)
    top.errorbar(epoch, mean_h, yerr=sem, color="tab:blue", marker="o",
                 markersize=4, capsize=3, linewidth=1.0)
    top.axhline(0.0, color="0.6", linewidth=0.6, linestyle=":")
    top.set_ylabel("mean slice height")
    width = 0.4
    e = np.asarray(epoch)
    bottom.bar(e - width / 2, barriers, width=width, color="tab:orange",
               label="barriers")
    bottom.bar(e + width / 2, significant, width=width, color="tab:red",
               label="significant")
    bottom.set_xlabel("epoch")
    bottom.set_ylabel("count")
    bottom.legend(loc="best")
    return [_save(fig, Path(out_dir) / "heights.svg")]


def render_cosine_study(path, out_dir):
    rows = _read_csv(path, COSINE_STUDY_HEADER)
    series = {}
    order = []
    for line, row in enumerate(rows, start=2):
        name = row[0]
        if name not in series:
            series[name] = ([], [])
            order.append(name)
        smoothed = _opt(path, line, "smoothed", row[6])
        if smoothed is None:
            continue
        series[name][0].append(_num(path, line, "t", row[4]))
        series[name][1].append(smoothed)
    fig = _figure()
    ax = fig.add_subplot()
    for name in order:
        t, values = series[name]
        ax.plot(t, values, linewidth=1.1, label=name)
    ax.axhline(0.0, color="0.6", linewidth=0.6, linestyle=":")
    ax.axhline(-1.0, color="0.6", linewidth=0.6, linestyle=":")
    ax.set_ylim(-1.05, 1.05)
    ax.set_xlabel("iteration")
    ax.set_ylabel("smoothed gradient cosine")
    ax.legend(loc="best")
    return [_save(fig, Path(out_dir) / "cosine_study.svg")]


def render_curvature(path, out_dir):
    rows = _read_csv(path, CURVATURE_HEADER)
    epoch, norm, acc, converged = [], [], [], []
    for line, row in enumerate(rows, start=2):
        epoch.append(_num(path, line, "epoch", row[0]))
        norm.append(_num(path, line, "spectral_norm", row[1]))
        if row[2] not in ("true", "false"):
            raise PlotDataError(f"{path}:{line}: bad converged value {row[2]!r}")
        converged.append(row[2] == "true")
        acc.append(_num(path, line, "val_accuracy", row[4]))
    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(epoch, norm, color="tab:blue", linewidth=1.0)
    ok = [c for c in range(len(epoch)) if converged[c]]
    bad = [c for c in range(len(epoch)) if not converged[c]]
    ax.plot([epoch[i] for i in ok], [norm[i] for i in ok], "o",
            color="tab:blue", markersize=5, label="spectral norm")
    if bad:
        ax.plot([epoch[i] for i in bad], [norm[i] for i in bad], "o",
                markerfacecolor="none", markeredgecolor="tab:blue",
                markersize=5, label="not converged")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Hessian spectral norm")
    twin = ax.twinx()
    twin.plot(epoch, acc, color="tab:red", linestyle="--", linewidth=1.0,
              label="val accuracy")
    twin.set_ylabel("validation accuracy")
    twin.set_ylim(0.0, 1.05)
    handles, labels = ax.get_legend_handles_labels()
    handles2, labels2 = twin.get_legend_handles_labels()
    ax.legend(handles + handles2, labels + labels2, loc="best")
    return [_save(fig, Path(out_dir) / "curvature.svg")]


def render_rates(path, out_dir):
    rows = _read_csv(path, RATES_HEADER)
    series = {}
    order = []
    for line, row in enumerate(rows, start=2):
        lam = _num(path, line, "lambda", row[0])
        if lam not in series:
            series[lam] = ([], [])
            order.append(lam)
        series[lam][0].append(_num(path, line, "eta", row[1]))
        series[lam][1].append(_num(path, line, "rate", row[2]))
    fig = _figure()
    ax = fig.add_subplot()
    for lam in order:
        etas, rates = series[lam]
        ax.plot(etas, rates, marker=".", markersize=4, linewidth=1.0,
                label=f"lambda={lam:g}")
    ax.axhline(1.0, color="0.4", linewidth=0.8, linestyle=":")
    ax.set_xlabel("step size")
    ax.set_ylabel("per-step contraction rate")
    ax.legend(loc="best")
    return [_save(fig, Path(out_dir) / "rates.svg")]


def render_schedules(path, out_dir):
    rows = _read_csv(path, SCHEDULES_HEADER)
    t, step, cyc, trap = [], [], [], []
    for line, row in enumerate(rows, start=2):
        t.append(_num(path, line, "t", row[0]))
        step.append(_num(path, line, "stepwise", row[1]))
        cyc.append(_num(path, line, "cyclical", row[2]))
        trap.append(_num(path, line, "trapezoid", row[3]))
    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(t, step, linewidth=1.1, label="stepwise")
    ax.plot(t, cyc, linewidth=1.1, label="cyclical")
    ax.plot(t, trap, linewidth=1.1, label="trapezoid")
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    ax.legend(loc="best")
    return [_save(fig, Path(out_dir) / "schedules.svg")]


RENDERERS = {
    "interp.csv": render_interp,
    "trajectory.csv": render_trajectory,
    "epochs.csv": render_epochs,
    "cosine_study.csv": render_cosine_study,
    "curvature.csv": render_curvature,
    "rates.csv": render_rates,
    "schedules.csv": render_schedules,
}


def render_plots(run_dir):
    """Render every recognized CSV under run_dir; returns written paths."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    written = []
    matched = False
    for csv_path in sorted(run_dir.rglob("*.csv")):
        renderer = RENDERERS.get(csv_path.name)
        if renderer is None:
            continue
        matched = True
        written.extend(renderer(csv_path, csv_path.parent))
    if not matched:
        raise PlotDataError(f"no plottable CSV files under {run_dir}")
    return written
