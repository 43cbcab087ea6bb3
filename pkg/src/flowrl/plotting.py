"""SVG line charts of training logs and scaling curves."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ArtifactIOError, FormatError  # noqa: E402

POINT_GID = "datapoint"


def read_jsonl(path: str | Path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ArtifactIOError(path, exc.strerror or "unreadable") from exc
    rows = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {n} is not JSON") from exc
    return rows


def _lookup(row: dict, key: str):
    value = row
    for part in key.split("."):
        value = value[part]
    return value


def plot_series(xs: Sequence[float], series: dict[str, Sequence[float]], out: str | Path,
                xlabel: str, ylabel: str, title: str = "") -> None:
    """Line chart with one marker per point; each marker is its own SVG element with id
    ``datapoint-<n>`` so the points can be counted in the file."""
    plt.rcParams["svg.hashsalt"] = "flowrl"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    n = 0
    for name, ys in series.items():
        ax.plot(xs, ys, linewidth=1.2, label=name)
        for x, y in zip(xs, ys):
            (pt,) = ax.plot([x], [y], marker="o", markersize=3, color="black", linestyle="none")
            pt.set_gid(f"{POINT_GID}-{n}")
            n += 1
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    try:
        fig.savefig(out, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise ArtifactIOError(out, exc.strerror or "cannot write") from exc
    finally:
        plt.close(fig)


def plot_log(log_path: str | Path, out: str | Path, metrics: Sequence[str] = ("mean_reward",)) -> int:
    rows = read_jsonl(log_path)
    if not rows:
        raise FormatError(f"{log_path}: empty log")
    try:
        xs = [r.get("iteration", i) for i, r in enumerate(rows)]
        series = {m: [float(_lookup(r, m)) for r in rows] for m in metrics}
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{log_path}: missing metric {exc}") from exc
    plot_series(xs, series, out, "iteration", ", ".join(metrics))
    return len(rows)


def count_points(svg_path: str | Path) -> int:
    return Path(svg_path).read_text().count(f'id="{POINT_GID}-')
