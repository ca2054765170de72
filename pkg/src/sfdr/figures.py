"""Render run diagnostics to image files next to the text outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricReport  # noqa: E402
from .trainer import RunManifest  # noqa: E402


def save_loss_curve(manifest: RunManifest, path) -> None:
    epochs = [r.epoch for r in manifest.epochs]
    losses = [r.train_loss for r in manifest.epochs]
    vals = [r.val_cider for r in manifest.epochs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    if any(v is not None for v in vals):
        ax2 = ax.twinx()
        ax2.plot(epochs, [np.nan if v is None else v for v in vals],
                 color="tab:orange", label="val consensus (raw)")
        ax2.set_ylabel("validation consensus score")
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_metric_bars(report: MetricReport, path) -> None:
    fig, (left, right) = plt.subplots(
        1, 2, figsize=(8, 4), gridspec_kw={"width_ratios": [4, 1]})
    names = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR-lite", "ROUGE-L"]
    values = list(report.bleu) + [report.meteor, report.rouge_l]
    left.bar(names, values, color="tab:blue")
    left.set_ylim(0, 105)
    left.set_ylabel("score (0-100)")
    left.tick_params(axis="x", rotation=45)
    right.bar(["CIDEr"], [report.cider], color="tab:orange")
    right.set_ylabel("score (100x raw)")
    fig.suptitle("caption metrics")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_attention_heatmap(tokens: list[str], rows: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, rows.shape[1] * 0.45),
                                    max(3.0, len(tokens) * 0.35)))
    image = ax.imshow(rows, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(tokens)), labels=tokens)
    ax.set_xlabel("feature node")
    ax.set_title("cross-attention per generated token")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
