"""Figures for bench reports: shifting-error histograms and accuracy vs. bits."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=9)


def plot_error_histograms(report, path):
    """One panel per bit width, frequencies of each shifting error averaged over layers."""
    hists = report["shifting_error_histograms"]
    if not hists:
        return None
    m = report["config"]["extra_bits"]
    fig, axes = plt.subplots(1, len(hists), figsize=(3.2 * len(hists), 2.8), squeeze=False)
    for ax, (n, layers) in zip(axes[0], sorted(hists.items(), key=lambda kv: int(kv[0]))):
        counts = [0] * (1 << m)
        for h in layers.values():
            counts = [a + b for a, b in zip(counts, h["counts"])]
        total = sum(counts) or 1
        labels = [f"{k / (1 << m):g}" for k in range(1 << m)]
        ax.bar(range(1 << m), [c / total for c in counts], color="0.35", width=0.75)
        ax.set_xticks(range(1 << m))
        ax.set_xticklabels(labels, rotation=45)
        ax.set_title(f"{n} bits, m={m}", fontsize=10)
        ax.set_xlabel("shifting error (steps)", fontsize=9)
        _style(ax)
    axes[0][0].set_ylabel("frequency", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy(report, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    for method, marker in (("direct", "s"), ("dqa", "o")):
        cells = sorted((c for c in report["cells"] if c["method"] == method), key=lambda c: c["n"])
        if cells:
            ax.plot([c["n"] for c in cells], [c["accuracy_mean"] for c in cells], marker=marker, label=method)
    ax.axhline(report["full_precision_accuracy"], color="0.6", ls="--", lw=1, label="float")
    ax.set_xlabel("target bits", fontsize=9)
    ax.set_ylabel("accuracy", fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
