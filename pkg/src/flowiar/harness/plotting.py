"""Learning curves across seeds: tidy data files plus deterministic PNG rendering."""

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..errors import ConfigError  # noqa: E402

X_AXES = {"steps": "env_steps", "wall_clock": "wall_clock_s"}
SOURCES = {"metrics": "metrics.csv", "updates": "updates.csv"}
# no timestamps or version strings in the PNG, so identical data gives identical bytes
PNG_METADATA = {"Software": None}
STYLE = {"figure.dpi": 100, "savefig.dpi": 100, "font.family": "DejaVu Sans", "svg.hashsalt": "flowiar"}


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _float(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return math.nan


def best_till_now(values):
    """Running maximum, ignoring NaN entries until the first finite one."""
    out, best = [], -math.inf
    for v in values:
        if not math.isnan(v):
            best = max(best, v)
        out.append(best if best > -math.inf else math.nan)
    return out


def load_curves(run_dirs, y, x_axis="steps", source="metrics", transform=None):
    """``{run_label: (x, y)}`` arrays read from each run's CSV.

    Raises:
        ConfigError: the metric (or x column) is missing; lists what exists.
    """
    if x_axis not in X_AXES:
        raise ConfigError(f"unknown x axis {x_axis!r}; expected one of {list(X_AXES)}", "x_axis")
    if source not in SOURCES:
        raise ConfigError(f"unknown source {source!r}; expected one of {list(SOURCES)}", "source")
    curves = {}
    for run in run_dirs:
        path = Path(run) / SOURCES[source]
        if not path.exists():
            raise ConfigError(f"{path} does not exist", "runs")
        rows = read_csv(path)
        columns = list(rows[0].keys()) if rows else []
        x_col = X_AXES[x_axis]
        if source == "updates" and x_axis == "wall_clock":
            raise ConfigError("updates logs have no wall-clock column; use source=metrics", "x_axis")
        for col in (x_col, y):
            if col not in columns:
                raise ConfigError(f"metric {col!r} not found in {path}; available columns: {columns}", "y")
        xs = np.array([_float(r[x_col]) for r in rows])
        ys = [_float(r[y]) for r in rows]
        if transform == "best_till_now":
            ys = best_till_now(ys)
        elif transform is not None:
            raise ConfigError(f"unknown transform {transform!r}", "transform")
        curves[str(run)] = (xs, np.array(ys, dtype=float))
    if not curves:
        raise ConfigError("need at least one run directory", "runs")
    return curves


def aggregate(curves):
    """Mean and mean ± std band on the union of x values (linear interpolation per run)."""
    grid = np.unique(np.concatenate([x for x, _ in curves.values()]))
    stacked = []
    for x, y in curves.values():
        ok = ~np.isnan(y)
        if ok.sum() == 0:
            stacked.append(np.full(grid.shape, np.nan))
            continue
        vals = np.interp(grid, x[ok], y[ok])
        vals[(grid < x[ok].min()) | (grid > x[ok].max())] = np.nan
        stacked.append(vals)
    stacked = np.vstack(stacked)
    with np.errstate(all="ignore"):
        mean = np.nanmean(stacked, axis=0) if np.isfinite(stacked).any() else np.full(grid.shape, np.nan)
        std = np.nanstd(stacked, axis=0) if np.isfinite(stacked).any() else np.full(grid.shape, np.nan)
    return grid, mean, mean - std, mean + std


def write_tidy(groups, path, x_name="x", y_name="y"):
    """Long-format rows ``label, run, x, y`` from ``{label: {run: (x, y)}}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "run", x_name, y_name])
        for label, curves in groups.items():
            for run, (xs, ys) in curves.items():
                for x, y in zip(xs, ys):
                    w.writerow([label, run, repr(float(x)), repr(float(y))])


def read_tidy(path):
    """Inverse of :func:`write_tidy`: ``{label: {run: (x, y)}}`` plus the axis names."""
    rows = read_csv(path)
    if not rows:
        raise ConfigError(f"{path} is empty", "data")
    x_name, y_name = list(rows[0].keys())[2:4]
    groups = {}
    for r in rows:
        runs = groups.setdefault(r["label"], {})
        xs, ys = runs.setdefault(r["run"], ([], []))
        xs.append(float(r[x_name]))
        ys.append(float(r[y_name]))
    groups = {lab: {run: (np.array(x), np.array(y)) for run, (x, y) in runs.items()} for lab, runs in groups.items()}
    return groups, x_name, y_name


def render(groups, out_path, x_name, y_name, title=None):
    """Overlay one mean curve with a shaded band per label; returns the PNG path."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, curves in sorted(groups.items()):
            grid, mean, lo, hi = aggregate(curves)
            line = ax.plot(grid, mean, label=label or None)[0]
            ax.fill_between(grid, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel(x_name)
        ax.set_ylabel(y_name)
        if title:
            ax.set_title(title)
        if any(groups):
            ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(out_path, format="png", metadata=PNG_METADATA)
        plt.close(fig)
    return Path(out_path)


def plot_runs(run_dirs, y, out_prefix, x_axis="steps", source="metrics", transform=None, label="", groups=None):
    """Write ``<prefix>.png`` and ``<prefix>.csv`` (tidy data) for the given runs.

    ``groups`` maps label -> run directories for overlaid comparisons and
    replaces ``run_dirs``/``label`` when given.
    """
    groups = groups or {label: run_dirs}
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    data_path = out_prefix.with_suffix(".csv")
    x_name = X_AXES[x_axis] if x_axis in X_AXES else x_axis
    y_name = y if transform is None else f"{y}_{transform}"
    loaded = {lab: load_curves(dirs, y, x_axis, source, transform) for lab, dirs in groups.items()}
    write_tidy(loaded, data_path, x_name, y_name)
    png = render_from_data(data_path, out_prefix.with_suffix(".png"))
    return png, data_path


def render_from_data(data_path, out_path):
    groups, x_name, y_name = read_tidy(data_path)
    return render(groups, out_path, x_name, y_name)
