#!/usr/bin/env python3
"""Script to plot raw vs smoothed vertex trajectories and their spectra from a dump"""

import argparse
import os
import sys

import numpy as np
import matplotlib as mpl
mpl.use("Agg")
import matplotlib.pyplot as plt

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from storage.reports import read_trajectory_dump


def vertex_series(dump, row: int, col: int):
    """Raw and smoothed (x, y) paths of one vertex, ordered by frame"""
    pick = (dump["row"] == row) & (dump["col"] == col)
    order = np.argsort(dump["frame"][pick])
    raw = np.column_stack([dump["ox"][pick], dump["oy"][pick]])[order]
    smoothed = np.column_stack([dump["sx"][pick], dump["sy"][pick]])[order]
    return dump["frame"][pick][order], raw, smoothed


def plot_vertex(dump, row: int, col: int, out_dir: str) -> None:
    frames, raw, smoothed = vertex_series(dump, row, col)
    print(f"Plotting vertex ({row}, {col}) over {len(frames)} frames...")

    fig, axes = plt.subplots(2, 2, figsize=(11, 6))
    for axis, name in enumerate("xy"):
        ax = axes[0, axis]
        ax.plot(frames, raw[:, axis], label="raw O", color="tab:gray", linewidth=1)
        ax.plot(frames, smoothed[:, axis], label="smoothed S", color="tab:blue", linewidth=1.5)
        ax.set_title(f"{name} position")
        ax.set_xlabel("frame")
        ax.legend(loc="best")

        ax = axes[1, axis]
        for series, label, color in ((raw, "raw O", "tab:gray"), (smoothed, "smoothed S", "tab:blue")):
            energy = np.abs(np.fft.rfft(series[:, axis] - series[:, axis].mean())) ** 2
            ax.semilogy(np.arange(len(energy)), energy + 1e-12, label=label, color=color)
        ax.set_title(f"{name} spectrum")
        ax.set_xlabel("DFT bin")
        ax.legend(loc="best")

    fig.tight_layout()
    path = os.path.join(out_dir, f"vertex_{row}_{col}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"Saved {path}")


def plot_variance(dump, out_dir: str) -> None:
    """Per-frame variance across vertices of the frame-to-frame velocity"""
    frames = np.unique(dump["frame"])
    print(f"Plotting velocity variance over {len(frames)} frames...")
    rows = int(dump["row"].max()) + 1
    cols = int(dump["col"].max()) + 1
    order = np.lexsort((dump["col"], dump["row"], dump["frame"]))
    shape = (len(frames), rows, cols)
    raw = np.stack([dump["ox"][order].reshape(shape), dump["oy"][order].reshape(shape)], axis=-1)
    smoothed = np.stack([dump["sx"][order].reshape(shape), dump["sy"][order].reshape(shape)], axis=-1)

    fig, ax = plt.subplots(figsize=(8, 4))
    for series, label, color in ((raw, "raw O", "tab:gray"), (smoothed, "smoothed S", "tab:blue")):
        velocity = np.diff(series, axis=0)
        ax.plot(frames[1:], velocity.reshape(len(frames) - 1, -1).var(axis=1), label=label,
                color=color)
    ax.set_xlabel("frame")
    ax.set_ylabel("velocity variance (px²)")
    ax.legend(loc="best")
    fig.tight_layout()
    path = os.path.join(out_dir, "variance.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"Saved {path}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("dump", help="trajectory CSV written by stabilize --dump-trajectories")
    parser.add_argument("--out", default="plots")
    parser.add_argument("--vertex", default="0,0", help="row,col of the vertex to plot")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    print(f"Loading trajectories from {args.dump}...")
    dump = read_trajectory_dump(args.dump)
    row, col = (int(v) for v in args.vertex.split(","))
    plot_vertex(dump, row, col, args.out)
    plot_variance(dump, args.out)
    print("Done")


if __name__ == "__main__":
    main()
