"""Optional matplotlib figures for iteration curves and flatness profiles."""
from __future__ import annotations

import csv
from pathlib import Path


def _pyplot():
    try:
        import matplotlib
    except ImportError as e:
        raise RuntimeError("plotting needs matplotlib (pip install rapattack[plot])") from e
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_curves(csv_path: str | Path, png_path: str | Path):
    """Success rate against iteration, one line per (surrogate, recipe)."""
    plt = _pyplot()
    series: dict = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(f"{row['surrogate']} {row['recipe']}", []).append((int(row["checkpoint"]), float(row["rate"])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("success rate (%)")
    ax.set_title(Path(csv_path).stem)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_profiles(report: dict, png_path: str | Path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    mags = [a * 255 for a in report["magnitudes"]]
    for name, entry in report["recipes"].items():
        ax.plot(mags, entry["mean_delta"], marker=".", label=name)
    ax.set_xlabel("a (x 1/255)")
    ax.set_ylabel("mean loss change")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
