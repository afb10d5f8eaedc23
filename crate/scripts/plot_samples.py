"""Scatter plots of walkback CSV outputs.

    python scripts/plot_samples.py data.csv samples.csv -o samples.png
    python scripts/plot_samples.py --chain samples.csv.chain.csv -o chain.png
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load(path):
    with open(path) as f:
        first = f.readline()
    skip = 0 if first and first[0] in "-+.0123456789" else 1
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=skip))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("files", nargs="*", help="point CSVs, overlaid in order")
    ap.add_argument("--chain", help="chain dump (chain,step,x0,x1) to plot as panels by step")
    ap.add_argument("-o", "--out", default="plot.png")
    args = ap.parse_args()

    if args.chain:
        d = load(args.chain)
        steps = np.unique(d[:, 1])
        fig, axes = plt.subplots(1, len(steps), figsize=(2.5 * len(steps), 2.5), squeeze=False)
        for ax, s in zip(axes[0], steps):
            pts = d[d[:, 1] == s]
            ax.scatter(pts[:, 2], pts[:, 3], s=2)
            ax.set_title(f"step {int(s)}")
            ax.set_xticks([])
            ax.set_yticks([])
    else:
        fig, ax = plt.subplots(figsize=(5, 5))
        for path in args.files:
            pts = load(path)
            ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.5, label=path)
        ax.legend(markerscale=5)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)


if __name__ == "__main__":
    main()
