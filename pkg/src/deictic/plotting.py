"""Learning-curve figures (PNG via matplotlib) and gnuplot-ready data files.

Also usable as a script::

    deictic-plot runs/fig3/deictic/curve.csv runs/fig3/baseline/curve.csv -o fig3.png
"""

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .learner import LearningCurve, rolling_mean  # noqa: E402

COLORS = {"deictic": "tab:red", "baseline": "tab:blue"}


def _smoothed(curve: LearningCurve, window: int) -> np.ndarray:
    """Trailing mean that uses the partial window at the start of a run."""
    r = curve.rewards()
    full = rolling_mean(r, window)
    head = min(window - 1, len(r))
    full[:head] = np.cumsum(r[:head]) / np.arange(1, head + 1)
    return full


def write_gnuplot(curves: Mapping[str, LearningCurve], path, window: int = 100) -> Path:
    """One data block per curve (``index`` in gnuplot), blocks separated by two blank lines."""
    path = Path(path)
    with open(path, "w") as fh:
        for label, curve in curves.items():
            fh.write(f"# {label}\n# episode steps stage reward rolling_{window}\n")
            smooth = _smoothed(curve, window)
            for row, s in zip(curve.rows, smooth):
                fh.write(f"{row.episode} {row.steps} {row.stage} {row.reward:g} {s:.6f}\n")
            fh.write("\n\n")
    return path


def plot_curves(curves: Mapping[str, LearningCurve], path, window: int = 100, title: str = "") -> Path:
    """Rolling mean reward per episode; dotted lines mark curriculum stage switches."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label, curve in curves.items():
        if not curve.rows:
            continue
        episodes = np.array([r.episode for r in curve.rows])
        color = COLORS.get(label)
        ax.plot(episodes, _smoothed(curve, window), label=label, color=color, lw=1.2)
        stages = np.array([r.stage for r in curve.rows])
        for e in episodes[1:][np.diff(stages) != 0]:
            ax.axvline(e, color=color or "0.5", ls=":", lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"mean reward (last {window})")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="deictic-plot", description="plot learning-curve CSV files")
    parser.add_argument("curves", nargs="+", help="curve CSV files (label = parent directory name)")
    parser.add_argument("-o", "--out", default="curves.png", help="PNG path; a .dat file is written next to it")
    parser.add_argument("--window", type=int, default=100)
    parser.add_argument("--title", default="")
    args = parser.parse_args(argv)
    curves = {}
    for p in args.curves:
        p = Path(p)
        curves[p.parent.name or p.stem] = LearningCurve.read(p)
    out = Path(args.out)
    plot_curves(curves, out, args.window, args.title)
    write_gnuplot(curves, out.with_suffix(".dat"), args.window)
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
