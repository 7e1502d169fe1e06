"""Training-curve figure: accuracy and loss vs epoch, written as SVG.

The file must be byte-identical across runs with the same history, so the
renderer pins the Agg backend, fixes the SVG id hash salt, and strips the
creation-date metadata that would otherwise embed a wall-clock timestamp.
"""

from __future__ import annotations

from .optim import TrainReport


def render_curves(report: TrainReport, path) -> None:
    """Write a two-panel accuracy/loss line chart for a training run."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "reslink"

    epochs = [e.epoch for e in report.epochs]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10.0, 4.0))

    ax_acc.plot(epochs, [e.train_acc for e in report.epochs], label="train")
    ax_acc.plot(epochs, [e.val_acc for e in report.epochs], label="val")
    ax_acc.set_title("accuracy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")

    ax_loss.plot(epochs, [e.train_loss for e in report.epochs], label="train")
    ax_loss.plot(epochs, [e.val_loss for e in report.epochs], label="val")
    ax_loss.set_title("loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")

    for ax in (ax_acc, ax_loss):
        ax.legend()
        ax.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
