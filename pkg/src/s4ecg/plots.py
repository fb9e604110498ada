"""SVG charts of multi-run comparisons and input size curves"""

import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

from s4ecg.experiments import summarize_curve
from s4ecg.stats import MultiRunVerdict

logger = logging.getLogger(__name__)


def _save(fig: plt.Figure, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info("Wrote %s", path)


def plot_comparison(verdict: MultiRunVerdict, path: str, title: str = "") -> None:
    """Bar chart of the median AUC difference per label with interquartile bars.

    Labels where model a is significantly better (worse) are marked with + (-).
    """
    frame = verdict.to_frame()
    lower = (frame["median"] - frame["q25"]).clip(lower=0)
    upper = (frame["q75"] - frame["median"]).clip(lower=0)
    colors = frame["verdict"].map({"better": "tab:green", "worse": "tab:red"}).fillna("tab:gray")

    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(frame)), 4))
    positions = range(len(frame))
    ax.bar(positions, frame["median"], yerr=[lower, upper], color=list(colors), capsize=3)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(list(positions))
    ax.set_xticklabels([f"{label}{marker}" for label, marker in zip(frame["label"], frame["marker"])], rotation=90)
    ax.set_ylabel("AUC difference (a - b)")
    ax.set_title(title or f"{verdict.macro.n_comparisons} comparisons, threshold {verdict.threshold:g}")
    _save(fig, path)


def plot_curve(curve: pd.DataFrame, path: str, title: str = "") -> pd.DataFrame:
    """Mean test macro AUC per input size with standard deviation bars.

    Returns:
        the plotted summary
    """
    summary = summarize_curve(curve)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(summary["window_seconds"], summary["mean"], yerr=summary["std"].fillna(0.0), marker="o", capsize=3)
    ax.set_xlabel("input size (s)")
    ax.set_ylabel("macro AUC")
    ax.set_title(title or "macro AUC versus input size")
    _save(fig, path)
    return summary
