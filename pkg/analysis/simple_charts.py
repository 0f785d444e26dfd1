#!/usr/bin/env python3
"""
Simple matplotlib/seaborn charts for training histories and comparison tables.
"""

import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

sns.set_palette("husl")


def plot_history(history_csv, out_png: str = "training_history.png") -> str:
    """Training loss per step with the sparse validation points on top"""

    df = pd.read_csv(history_csv)
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.plot(df["step"], df["train_loss"], linewidth=1.5, label="train")
    val = df.dropna(subset=["val_loss"])
    if not val.empty:
        ax.plot(val["step"], val["val_loss"], marker="o", linewidth=2, label="validation")
        best = val.loc[val["val_loss"].idxmin()]
        ax.annotate(f"best {best['val_loss']:.3f} @ {int(best['step'])}",
                    xy=(best["step"], best["val_loss"]), xytext=(10, 20), textcoords="offset points",
                    arrowprops=dict(arrowstyle="->"), fontweight="bold")
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.set_yscale("log")
    ax.set_title("Training History")
    ax.grid(True, alpha=0.3)
    ax.legend()

    plt.tight_layout()
    plt.savefig(out_png, dpi=300, bbox_inches="tight")
    plt.close(fig)
    print(f"💾 Chart saved to: {out_png}")
    return out_png


def plot_comparison(table_csv, out_png: str = "comparison.png") -> str:
    """Per-method metric distributions from a compare table"""

    df = pd.read_csv(table_csv)
    metrics = [m for m in ("si_sdr", "stoi") if m in df.columns]
    fig, axes = plt.subplots(1, len(metrics), figsize=(7 * len(metrics), 5), squeeze=False)
    fig.suptitle("Enhancement Comparison", fontsize=16, fontweight="bold")

    order = df.groupby("method")[metrics[0]].mean().sort_values().index
    for ax, metric in zip(axes[0], metrics):
        sns.boxplot(data=df, x="method", y=metric, order=order, ax=ax)
        ax.set_xlabel("")
        ax.set_ylabel(metric.upper().replace("_", "-"))
        ax.tick_params(axis="x", rotation=45)
        ax.grid(axis="y", alpha=0.3)

    plt.tight_layout()
    plt.savefig(out_png, dpi=300, bbox_inches="tight")
    plt.close(fig)
    print(f"💾 Charts saved to: {out_png}")
    return out_png


if __name__ == "__main__":
    if len(sys.argv) != 3 or sys.argv[1] not in ("history", "compare"):
        print("usage: python analysis/simple_charts.py history|compare file.csv")
        sys.exit(2)
    if sys.argv[1] == "history":
        plot_history(sys.argv[2])
    else:
        plot_comparison(sys.argv[2])
