#!/usr/bin/env python3
"""
Plots for probe matrices and sweep tables written by ``cli.py``.

    python plot_results.py probe runs/probe/probe_layer2.csv --out probe.png
    python plot_results.py sweep runs/sweep/sweep.csv --out sweep.png
"""

import click
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from utils.metrics import METRIC_NAMES  # noqa: E402


def plot_probe_matrix(csv_path, out_path, title=None):
    """Heatmap of an averaged channel probability matrix."""
    matrix = pd.read_csv(csv_path, index_col=0).to_numpy()
    mass = np.trace(matrix) / matrix.shape[0]

    plt.figure(figsize=(6, 5))
    plt.imshow(matrix, cmap="viridis", vmin=0.0, vmax=max(float(matrix.max()), 1e-12))
    plt.colorbar(label="probability")
    plt.title(title or f"Channel probability matrix (diagonal mass {mass:.3f})")
    plt.xlabel("channel j")
    plt.ylabel("channel i")
    plt.tight_layout()
    plt.savefig(out_path, dpi=150)
    plt.close()
    return out_path


def plot_sweep(csv_path, out_path):
    """Bar chart of every metric per channel config, one bar per penalty."""
    table = pd.read_csv(csv_path)
    configs = list(dict.fromkeys(table["config"]))
    penalties = list(dict.fromkeys(table["penalty"]))
    colors = ["#FF9999", "#66B2FF", "#99FF99", "#FFD580"]
    width = 0.8 / len(penalties)
    x = np.arange(len(configs))

    plt.figure(figsize=(15, 8))
    for i, metric in enumerate(METRIC_NAMES):
        plt.subplot(2, 2, i + 1)
        for j, penalty in enumerate(penalties):
            rows = table[table["penalty"] == penalty].groupby("config")[metric].mean()
            values = [rows.get(c, np.nan) for c in configs]
            plt.bar(x + j * width, values, width, label=penalty, color=colors[j % len(colors)], edgecolor="black")
        plt.xticks(x + width * (len(penalties) - 1) / 2, configs, rotation=20, fontsize=8)
        plt.title(f"{metric} comparison")
        plt.ylabel(metric)
        plt.grid(axis="y", linestyle="--", alpha=0.7)
        plt.legend()

    plt.tight_layout()
    plt.savefig(out_path, dpi=150)
    plt.close()
    return out_path


@click.group()
def main():
    """Render probe and sweep outputs."""


@main.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--out", "out_path", default="probe.png", show_default=True)
def probe(csv_path, out_path):
    click.echo(f"Saved {plot_probe_matrix(csv_path, out_path)}")


@main.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--out", "out_path", default="sweep.png", show_default=True)
def sweep(csv_path, out_path):
    click.echo(f"Saved {plot_sweep(csv_path, out_path)}")


if __name__ == "__main__":
    main()
