"""Static figures (PNG) for the CLI; matplotlib runs headless."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path, title: str, footer: str | None) -> None:
    fig.suptitle(title)
    if footer:
        fig.text(0.01, 0.01, footer, fontsize=6, alpha=0.7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bound_curve(path, ranking, xi: float, noise=None, footer=None) -> None:
    """Ranked filters against their l1 bound and, if given, observed noise."""
    order = np.asarray(ranking.order)
    bound = np.asarray(ranking.scores)[order] * xi
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(1, len(order) + 1)
    ax.plot(x, bound, label="noise upper bound")
    if noise is not None:
        ax.plot(x, np.asarray(noise.per_filter_linf)[order], ".", label="observed max |noise|")
    ax.set_xlabel("filter rank (by weight l1 norm)")
    ax.set_ylabel("l-inf activation noise")
    ax.legend()
    _save(fig, path, f"{ranking.layer_id}: filter ranking", footer)


def mask_curve(path, fractions, curves: dict[str, list[float]], clean: float, perturbed: float,
               layer_id: str, footer=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, ys in curves.items():
        ax.plot(fractions, ys, marker="o", label=label)
    ax.axhline(clean, ls="--", c="gray", lw=0.8, label="clean")
    ax.axhline(perturbed, ls=":", c="gray", lw=0.8, label="perturbed")
    ax.set_xlabel("fraction of filters masked")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    _save(fig, path, f"{layer_id}: masking perturbed activations", footer)


def fooling_curves(path, curves: dict[str, list[float]], footer=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, marker=".", label=label)
    ax.set_xlabel("attack epoch")
    ax.set_ylabel("fooling ratio")
    ax.set_ylim(0, 1.02)
    ax.legend()
    _save(fig, path, "white-box universal attack", footer)


def restoration_bars(path, rows: list[tuple[str, float, float]], footer=None) -> None:
    """``rows`` are (condition, baseline restoration, defended restoration)."""
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows)), 3.8))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r[1] for r in rows], 0.4, label="baseline")
    ax.bar(x + 0.2, [r[2] for r in rows], 0.4, label="defended")
    ax.set_xticks(x)
    ax.set_xticklabels([r[0] for r in rows], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("restoration accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path, "restoration accuracy by condition", footer)
