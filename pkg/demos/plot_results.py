# Plot the CSVs written by the CLI or the acceptance tests
#
#   python3 demos/plot_results.py runs/acceptance
#
# Needs matplotlib, which the library itself does not depend on. Each known
# CSV found in the directory becomes one PNG next to it.

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/acceptance")


def _value(text):
    try:
        return float(text)
    except ValueError:
        return text


def rows(name):
    with open(root / name, newline="") as fh:
        return [{k: _value(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def save(fig, name):
    fig.tight_layout()
    fig.savefig(root / name, dpi=120)
    print("wrote", root / name)


# %% Epistemic uncertainty beyond the training range

if (root / "extrapolation.csv").exists():
    prof = rows("extrapolation.csv")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["x"] for r in prof], [r["mean_ep"] for r in prof], label="epistemic")
    ax.plot([r["x"] for r in prof], [r["mean_al"] for r in prof], label="aleatoric")
    ax.axvspan(5, 10, color="grey", alpha=0.15)
    ax.set_xlabel("x")
    ax.legend()
    save(fig, "extrapolation.png")

# %% Outlier severity

if (root / "outlier.csv").exists():
    by_head = defaultdict(list)
    for r in rows("outlier.csv"):
        by_head[r["head"]].append((r["severity"], r["mse"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for head, pts in by_head.items():
        ax.plot(*zip(*sorted(pts)), marker="o", label=head)
    ax.set_xlabel("outlier severity")
    ax.set_ylabel("test MSE")
    ax.legend()
    save(fig, "outlier.png")

# %% Active pixel selection

if (root / "active.csv").exists():
    curves = defaultdict(lambda: defaultdict(list))
    for r in rows("active.csv"):
        curves[r["mode"]][int(r["n_added"])].append(r["mse"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, pts in curves.items():
        n = sorted(pts)
        ax.plot(n, [sum(pts[i]) / len(pts[i]) for i in n], label=mode)
    ax.set_xlabel("pixels added")
    ax.set_ylabel("MSE")
    ax.legend()
    save(fig, "active.png")
