"""Report figures. Uses the non-interactive Agg backend and writes PNG files."""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_miou_grid(rep, path):
    """mIoU per evaluation domain across steps, oracle dashed."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, dom in enumerate(rep.domains):
            steps = [t for t in rep.steps if t >= k]
            if not steps:
                continue
            line, = ax.plot(steps, [100 * rep.miou[(t, dom)] for t in steps], "o-", label=dom)
            ax.plot(steps, [100 * rep.oracle[(t, dom)] for t in steps], "--",
                    color=line.get_color(), alpha=0.6)
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU (%)")
        ax.set_xticks(rep.steps)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_delta_bar(rep, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(rep.steps, [rep.delta_bar(t) for t in rep.steps], color="0.4")
        ax.set_xlabel("step")
        ax.set_ylabel(r"$\bar{\Delta}_t$ (%)")
        ax.set_xticks(rep.steps)
        return _save(fig, path)


def plot_loss_trace(trace, path, window=50):
    cols = ("l_ce_n", "l_ce_o", "l_lws_n", "l_kd_o", "total")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(trace))
        for c in cols:
            y = np.array([getattr(r, c) for r in trace])
            if not np.any(y):
                continue
            if len(y) >= window:
                y = np.convolve(y, np.ones(window) / window, mode="same")
            ax.plot(x, y, lw=1, label=c)
        bounds = [i for i in range(1, len(trace)) if trace[i].step != trace[i - 1].step]
        for b in bounds:
            ax.axvline(b, color="k", lw=0.5, ls=":")
        ax.set_yscale("log")
        ax.set_xlabel("update")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def plot_run(rep, trace, out_dir):
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    paths = [plot_miou_grid(rep, os.path.join(fig_dir, "miou.png")),
             plot_delta_bar(rep, os.path.join(fig_dir, "delta_bar.png"))]
    if trace:
        paths.append(plot_loss_trace(trace, os.path.join(fig_dir, "loss.png")))
    return paths


def plot_comparison(final_delta_bars, path, xlabel="variant"):
    """Bar chart of final-step delta-bar keyed by variant label."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(final_delta_bars)), 3.4))
        labels = list(final_delta_bars)
        ax.bar(range(len(labels)), [final_delta_bars[k] for k in labels], color="0.4")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(r"final $\bar{\Delta}$ (%)")
        return _save(fig, path)
