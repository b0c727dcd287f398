"""Figure rendering for training diagnostics.

Writes SVG line plots of the train/validation loss curves in a fixed
800x600 viewport. Rendering is deterministic: a fixed hash salt replaces the
random ids matplotlib would otherwise embed, and the creation date is
stripped, so reruns with equal inputs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SVG_RC = {
    "svg.hashsalt": "carmmi",
    "svg.fonttype": "path",
}


def _save(fig, path):
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _series(metrics, column):
    xs, ys = [], []
    for row in metrics:
        if row[column] != "":
            xs.append(int(row["step"]))
            ys.append(float(row[column]))
    return xs, ys


def plot_loss_curves(metrics, path, title="training curves"):
    """Reconstruction error over steps, train vs validation.

    metrics: list of metric-row dicts as written to metrics.csv. The
    widening of the validation curve away from the train curve is the
    diagnostic of interest.
    """
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(800 / 72, 600 / 72), sharex=True)
    steps = [int(r["step"]) for r in metrics]
    train = [float(r["train_mel_l1"]) + float(r["train_linear_l1"])
             for r in metrics]
    val = [float(r["val_mel_l1"]) + float(r["val_linear_l1"]) for r in metrics]
    ax.plot(steps, train, label="train reconstruction L1", color="tab:blue")
    ax.plot(steps, val, label="validation reconstruction L1",
            color="tab:orange")
    ax.set_ylabel("mel + linear L1")
    ax.set_title(title)
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3)

    gap = [v - t for v, t in zip(val, train)]
    ax2.plot(steps, gap, label="validation - train gap", color="tab:red")
    xs, ys = _series(metrics, "mi_lower_bound")
    if xs:
        twin = ax2.twinx()
        twin.plot(xs, ys, label="MI lower bound", color="tab:green",
                  linestyle="--")
        twin.set_ylabel("nats")
        twin.legend(loc="lower right")
    ax2.set_xlabel("step")
    ax2.set_ylabel("gap")
    ax2.legend(loc="upper left")
    ax2.grid(True, alpha=0.3)
    fig.align_ylabels()
    return _save(fig, path)


def plot_gap_comparison(runs, path, title="reconstruction gap by objective"):
    """Overlay validation-minus-train gap curves from several runs.

    runs: list of (label, metric-rows) pairs.
    """
    fig, ax = plt.subplots(figsize=(800 / 72, 600 / 72))
    for label, metrics in runs:
        steps = [int(r["step"]) for r in metrics]
        gap = [float(r["val_mel_l1"]) + float(r["val_linear_l1"])
               - float(r["train_mel_l1"]) - float(r["train_linear_l1"])
               for r in metrics]
        ax.plot(steps, gap, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("validation - train reconstruction L1")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
