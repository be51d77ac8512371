"""Line plots over experiment CSVs, rendered to SVG next to the data.

Rows sharing one x value within a group (e.g. the 20 hyperparameter samples
of a convergence sweep) are aggregated into a mean line with a +/- one
standard deviation band, the usual presentation for these curves. Output is
deterministic: fixed hash salt for SVG ids and no embedded date.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .errors import SchemaError  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "fpgrad"


def _read_columns(csv_path: str, wanted: list[str]) -> list[dict]:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{csv_path}: empty CSV")
        missing = [c for c in wanted if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{csv_path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{csv_path}: no data rows")
    return rows


def emit_plot(
    csv_path: str,
    x: str,
    y: str,
    out_path: str,
    group_by: str | None = None,
    log_y: bool = False,
    title: str | None = None,
) -> str:
    """Render one grouped mean +/- std line chart from a CSV to an SVG file."""
    wanted = [x, y] + ([group_by] if group_by else [])
    rows = _read_columns(csv_path, wanted)

    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        key = row[group_by] if group_by else ""
        groups.setdefault(key, []).append((float(row[x]), float(row[y])))

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for key in sorted(groups):
        pairs = np.array(groups[key])
        xs = np.unique(pairs[:, 0])
        means = np.array([pairs[pairs[:, 0] == xv, 1].mean() for xv in xs])
        stds = np.array([pairs[pairs[:, 0] == xv, 1].std() for xv in xs])
        if len(xs) == 1:
            ax.plot(xs, means, marker="o", label=key or None)
        else:
            ax.plot(xs, means, label=key or None)
            if np.any(stds > 0):
                ax.fill_between(xs, means - stds, means + stds, alpha=0.25)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    if title:
        ax.set_title(title)
    if group_by:
        ax.legend(title=group_by)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
