"""SVG line plots for loss traces and calibration curves."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp keep the SVG output byte-stable
plt.rcParams["svg.hashsalt"] = "laserflow"


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_calibration(curves: dict[str, dict], path: Path, title: str = "calibration") -> None:
    """``curves`` maps a label to ``{"expected": [...], "observed": [...]}``."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="ideal")
    for label, c in curves.items():
        ax.plot(c["expected"], c["observed"], lw=1.2, label=label)
    ax.set_xlabel("expected CDF")
    ax.set_ylabel("observed CDF")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2)
    _save(fig, path)


def write_calibration_csv(curves: dict[str, dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "expected", "observed"])
        for label, c in curves.items():
            for e, o in zip(c["expected"], c["observed"]):
                w.writerow([label, f"{e:.6f}", f"{o:.6f}"])


def read_calibration_csv(path: Path) -> dict[str, dict]:
    curves: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            c = curves.setdefault(row["curve"], {"expected": [], "observed": []})
            c["expected"].append(float(row["expected"]))
            c["observed"].append(float(row["observed"]))
    return curves


def plot_loss(csv_path: Path, path: Path) -> None:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    it = [int(r["iteration"]) for r in rows]
    for key in ("L_total", "L_cls", "L_reg"):
        ax1.plot(it, [float(r[key]) for r in rows], lw=0.8, label=key)
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    b_keys = [k for k in (rows[0] if rows else {}) if k.startswith("b_")]
    for key in b_keys:
        ax2.plot(it, [float(r[key]) for r in rows], lw=0.8, label=key)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("target scale (m)")
    if b_keys:
        ax2.legend(fontsize=6, ncol=2)
    _save(fig, path)
