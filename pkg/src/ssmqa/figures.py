"""Matplotlib rendering for the report paths.

Every figure is written next to the delimited output it visualizes: the
dataset statistics command renders the length scatter, the answer-start
versus context-length scatter and the correlation heatmaps; the evaluation
command renders a per-language bar chart of the five metrics. All
rendering is headless (Agg) and deterministic.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import STAT_FEATURES, DatasetStats
from .metrics import METRIC_NAMES, MetricReport

__all__ = ["render_stats_figures", "render_report_figure"]

LANG_COLORS = {"hi": "tab:blue", "mr": "tab:red"}
_DPI = 130


def _lang_color(lang: str):
    return LANG_COLORS.get(lang, "tab:gray")


def _scatter(stats: DatasetStats, xf: str, yf: str, title: str, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    xs = np.asarray(stats.features[xf])
    ys = np.asarray(stats.features[yf])
    langs = np.asarray(stats.langs)
    for lang in sorted(set(stats.langs)):
        m = langs == lang
        ax.scatter(xs[m], ys[m], s=9, alpha=0.5, label=lang,
                   color=_lang_color(lang), edgecolors="none")
    ax.set_xlabel(xf.replace("_", " "))
    ax.set_ylabel(yf.replace("_", " "))
    ax.set_title(title)
    ax.legend(title="language", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def _heatmap(ax, corr, title: str) -> None:
    corr = np.asarray(corr)
    im = ax.imshow(corr, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    labels = [f.replace("_", "\n") for f in STAT_FEATURES]
    ax.set_xticks(range(len(labels)), labels, fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    for i in range(corr.shape[0]):
        for j in range(corr.shape[1]):
            ax.text(j, i, f"{corr[i, j]:.2f}", ha="center", va="center", fontsize=7)
    ax.set_title(title, fontsize=9)
    return im


def render_stats_figures(stats: DatasetStats, out_dir: str) -> list:
    """Write the three statistics figures; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    p = os.path.join(out_dir, "question_len_vs_answer_len.png")
    _scatter(stats, "question_len", "answer_len",
             "Question length vs answer length", p)
    paths.append(p)

    p = os.path.join(out_dir, "answer_start_vs_context_len.png")
    _scatter(stats, "context_len", "answer_start",
             "Answer start position vs context length", p)
    paths.append(p)

    panels = [("all", stats.correlation)] + sorted(
        stats.per_language_correlation.items()
    )
    fig, axes = plt.subplots(1, len(panels), figsize=(4.0 * len(panels), 3.8))
    if len(panels) == 1:
        axes = [axes]
    for ax, (lang, corr) in zip(axes, panels):
        _heatmap(ax, corr, f"feature correlations ({lang})")
    fig.tight_layout()
    p = os.path.join(out_dir, "correlation_heatmap.png")
    fig.savefig(p, dpi=_DPI)
    plt.close(fig)
    paths.append(p)
    return paths


def render_report_figure(report: MetricReport, path: str,
                         baseline: MetricReport = None) -> str:
    """Grouped bars of the five metrics per language; an optional baseline
    report is drawn as hatched bars for before/after comparisons."""
    langs = sorted(report.corpus)
    n_groups = len(METRIC_NAMES)
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    width = 0.8 / (len(langs) * (2 if baseline else 1))
    x = np.arange(n_groups)
    slot = 0
    for lang in langs:
        if baseline and lang in baseline.corpus:
            vals = [baseline.corpus[lang][m] for m in METRIC_NAMES]
            ax.bar(x + slot * width, vals, width, color=_lang_color(lang),
                   alpha=0.4, hatch="//", label=f"{lang} (base)")
            slot += 1
        vals = [report.corpus[lang][m] for m in METRIC_NAMES]
        ax.bar(x + slot * width, vals, width, color=_lang_color(lang),
               label=lang)
        slot += 1
    ax.set_xticks(x + width * (slot - 1) / 2, METRIC_NAMES)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("Evaluation metrics per language")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
