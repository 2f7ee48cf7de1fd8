"""Report figures. Uses the Agg backend and strips PNG metadata so reruns are byte-identical."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.35,
    "grid.linewidth": 0.6,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}

PRE_COLOR = "#4C72B0"
POST_COLOR = "#DD8452"


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _figure(size=(4.5, 3.2)):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size, layout="constrained")
    return fig, ax


def plot_attack(report, path, title="causal attack"):
    """Pre vs post input-explanation cosine (dataset-level mean), one bar pair."""
    with plt.rc_context(STYLE):
        fig, ax = _figure((3.2, 3.0))
        vals = [report["mean_pre_similarity"], report["mean_post_similarity"]]
        ax.bar([0, 1], vals, color=[PRE_COLOR, POST_COLOR], width=0.6)
        ax.set_xticks([0, 1], ["before", "after"])
        ax.set_ylabel("mean cosine(input, explanation)")
        ax.set_title(f"{title} (n={report['n_cases']})")
        ax.axhline(0.0, color="#333333", linewidth=0.6)
        return _save(fig, path)


def plot_sweep(rows, path):
    """Accuracy against concepts per class |C_y|."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ks = [r["k"] for r in rows]
        ax.plot(ks, [r["accuracy"] for r in rows], marker="o", color=PRE_COLOR)
        ax.set_xticks(ks)
        ax.set_xlabel("concepts per class")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(-0.02, 1.02)
        return _save(fig, path)


def plot_factor(rows, path):
    """Fitted residual and the rank-truncation bound against N_c."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        nc = [r["n_concepts"] for r in rows]
        floor = 1e-18
        ax.semilogy(nc, [max(r["residual_sq"], floor) for r in rows], marker="o",
                    color=PRE_COLOR, label="fit")
        ax.semilogy(nc, [max(r["svd_bound_sq"], floor) for r in rows], linestyle="--",
                    color=POST_COLOR, label="SVD tail energy")
        ax.set_xlabel("N_c")
        ax.set_ylabel("squared Frobenius residual")
        ax.legend()
        return _save(fig, path)


def plot_eval(rows, path):
    """Per-seed accuracy of the tuned prompt and its concept decomposition."""
    with plt.rc_context(STYLE):
        fig, ax = _figure((5.0, 3.2))
        labels = [str(r["seed"]) for r in rows]
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r["acc_ptune"] for r in rows], 0.4, color=PRE_COLOR, label="P-tuning")
        ax.bar(x + 0.2, [r["acc_cd"] for r in rows], 0.4, color=POST_COLOR, label="CD")
        ax.set_xticks(x, labels)
        ax.set_xlabel("seed")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0.0, 1.05)
        ax.legend(loc="lower right")
        return _save(fig, path)
