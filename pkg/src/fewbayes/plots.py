"""Figure rendering for the CLI report paths.

Every figure sits next to a CSV with the same content; these helpers only
draw, they never compute. The Agg backend keeps everything headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_schedule_figure(steps, betas, path: str, title: str = "beta schedule"):
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(steps, betas, lw=1.5, color="tab:purple")
    ax.set_xlabel("step")
    ax.set_ylabel("beta")
    ax.set_title(title)
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_metrics_figure(rows, path: str):
    steps = [r["step"] for r in rows]
    fig, (ax_loss, ax_beta) = plt.subplots(2, 1, figsize=(7, 5.5), sharex=True)

    ax_loss.plot(steps, [r["total"] for r in rows], lw=1.0, label="total", color="tab:blue")
    ax_loss.plot(steps, [r["nll"] for r in rows], lw=1.0, label="nll", color="tab:orange", alpha=0.8)
    eval_steps = [r["step"] for r in rows if r["val_accuracy"] is not None]
    if eval_steps:
        ax_acc = ax_loss.twinx()
        ax_acc.plot(
            eval_steps,
            [r["val_accuracy"] for r in rows if r["val_accuracy"] is not None],
            "o-",
            color="tab:green",
            label="val accuracy",
            ms=4,
        )
        ax_acc.set_ylabel("val accuracy")
        ax_acc.set_ylim(0.0, 1.0)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.set_title("training metrics")

    ax_beta.plot(steps, [r["beta"] for r in rows], lw=1.0, color="tab:purple")
    ax_beta.set_ylabel("beta")
    ax_beta.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_latents_figure(latent_rows, path: str):
    """Scatter of the first two weight dimensions, colored by class."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    classes = sorted({row[1] for row in latent_rows})
    cmap = plt.get_cmap("tab10")
    for c in classes:
        xs = [row[3] for row in latent_rows if row[1] == c]
        ys = [row[4] if len(row) > 4 else 0.0 for row in latent_rows if row[1] == c]
        ax.scatter(xs, ys, s=6, alpha=0.5, color=cmap(c % 10), label=f"class {c}")
    ax.set_xlabel("dim 0")
    ax.set_ylabel("dim 1")
    ax.set_title("sampled class weights")
    if len(classes) <= 10:
        ax.legend(fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
