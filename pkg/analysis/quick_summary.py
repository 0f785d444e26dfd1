#!/usr/bin/env python3
"""
Quick summary of a comparison table written by `python -m src.cli compare`.
"""

import sys

import pandas as pd

METRIC_COLUMNS = ("si_sdr", "stoi")


def summarize_comparison(table_csv) -> pd.DataFrame:
    """Per-method means and the improvement over the noisy reference channel"""

    df = pd.read_csv(table_csv)
    metrics = [m for m in METRIC_COLUMNS if m in df.columns]
    if df.empty or not metrics:
        raise ValueError(f"{table_csv} has no rows or no metric columns")

    summary = df.groupby("method")[metrics].mean()
    summary.insert(0, "items", df.groupby("method")["item_id"].nunique())
    if "noisy" in summary.index:
        for metric in metrics:
            summary[f"{metric}_gain"] = summary[metric] - summary.loc["noisy", metric]
    summary = summary.sort_values(metrics[0], ascending=False)

    print("🎯 QUICK SUMMARY: Enhancement Comparison")
    print("=" * 55)
    print(f"📊 Table: {len(df)} rows, {df['item_id'].nunique()} items, {len(summary)} methods")
    if "condition" in df.columns:
        print(f"🔊 Conditions: {', '.join(sorted(df['condition'].astype(str).unique()))}")

    print(f"\n🏆 Methods by mean {metrics[0]}:")
    for i, (method, row) in enumerate(summary.iterrows(), 1):
        scores = "  ".join(f"{m}={row[m]:.3f}" for m in metrics)
        gain = f"  (+{row[f'{metrics[0]}_gain']:.2f} over noisy)" if f"{metrics[0]}_gain" in row else ""
        print(f"   {i}. {method}: {scores}{gain}")

    return summary


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python analysis/quick_summary.py table.csv")
        sys.exit(2)
    summarize_comparison(sys.argv[1])
