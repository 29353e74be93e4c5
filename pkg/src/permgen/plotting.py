"""Figures written next to the JSON/text reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import ScalarFormatter  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.5,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metrics(scalars: dict, path, title: str | None = None) -> None:
    """Accuracy, diversity ratios and entropies, one bar panel each."""
    acc = {k: v for k, v in scalars.items() if "bleu" in k and not k.startswith("self") and v is not None}
    div = {k: v for k, v in scalars.items() if k.startswith(("distinct", "self")) and v is not None}
    ent = {k: v for k, v in scalars.items() if k.startswith("entropy") and v is not None}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
        for ax, group, label in ((axes[0], acc, "accuracy"), (axes[1], div, "diversity (ratio)"),
                                 (axes[2], ent, "entropy (bits)")):
            names = list(group)
            ax.bar(range(len(names)), [group[n] for n in names], color="0.35")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels([n.replace("_", "-") for n in names], rotation=40, ha="right")
            ax.set_title(label)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_training_log(records: list[dict], path) -> None:
    """Training loss per step, with dev NLL points when present."""
    steps = [r["step"] for r in records if "loss" in r]
    losses = [r["loss"] for r in records if "loss" in r]
    dev = [(r["step"], r["dev_nll"]) for r in records if "dev_nll" in r]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.6))
        ax.plot(steps, losses, color="0.55", label="train (sampled order)")
        if dev:
            ax.plot([s for s, _ in dev], [v for _, v in dev], "o-", color="k", markersize=3, label="dev")
        ax.set_xlabel("step")
        ax.set_ylabel("token NLL (nats)")
        ax.set_yscale("log")
        ax.yaxis.set_major_formatter(ScalarFormatter())
        ax.yaxis.set_minor_formatter(ScalarFormatter())
        ax.legend()
        _save(fig, path)
