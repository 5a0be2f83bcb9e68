"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _style(ax):
    ax.grid(True, which="both", alpha=0.3)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def plot_bench(records, path) -> None:
    """Log-log attention-stage multiply-adds (and wall time) against side length."""
    fig, (ax_f, ax_t) = plt.subplots(1, 2, figsize=(9, 3.6))
    for variant in sorted({r.variant for r in records}):
        rows = sorted((r for r in records if r.variant == variant), key=lambda r: r.H)
        sizes = [r.H for r in rows]
        ax_f.loglog(sizes, [r.flops for r in rows], "o-", base=2, label=variant)
        ax_t.loglog(sizes, [r.wall_ns / 1e6 for r in rows], "o-", base=2, label=variant)
    ax_f.set_xlabel("N (H = W)")
    ax_f.set_ylabel("multiply-adds (attention stage)")
    ax_t.set_xlabel("N (H = W)")
    ax_t.set_ylabel("median wall time [ms]")
    for ax in (ax_f, ax_t):
        _style(ax)
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(log, path) -> None:
    """Loss per step, with validation F1/IoU on a twin axis when present."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    steps = [s for s, _, _ in log.steps]
    ax.semilogy(steps, [loss for _, loss, _ in log.steps], lw=1, color="C0", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    _style(ax)
    if log.validation:
        ax2 = ax.twinx()
        xs = [step for _, step, _ in log.validation]
        ax2.plot(xs, [r.f1 for _, _, r in log.validation], "o-", ms=2, color="C1", label="val F1")
        ax2.plot(xs, [r.iou for _, _, r in log.validation], "s-", ms=2, color="C2", label="val IoU")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("validation metric")
        ax2.legend(frameon=False, loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
