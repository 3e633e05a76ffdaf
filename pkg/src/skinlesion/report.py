"""Write metrics files and their figures side by side."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import MetricsReport  # noqa: E402

# fixed metadata keeps PNG bytes independent of the matplotlib build date
_PNG_META = {"Software": None}


def plot_confusion(confusion, class_names, path, title: str = "Confusion (rows: true class)") -> Path:
    conf = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45)
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    top = conf.max() if conf.size else 0
    for (i, j), v in np.ndenumerate(conf):
        ax.text(j, i, str(int(v)), ha="center", va="center", fontsize=7,
                color="white" if top and v > top / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_fold_accuracy(report: MetricsReport, path) -> Path:
    accs = [f.accuracy for f in report.folds]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(1, len(accs) + 1), accs, color="tab:blue")
    ax.axhline(report.mean_accuracy, color="tab:red", linestyle="--", label=f"mean {report.mean_accuracy:.3f}")
    ax.set_ylim(0, 1)
    ax.set_xlabel("fold")
    ax.set_ylabel("validation accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curves(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for f in report.folds:
        ax.plot(range(1, len(f.epoch_losses) + 1), f.epoch_losses, marker="o", label=f"fold {f.fold + 1}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    if len(report.folds) <= 10:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def write_report(report: MetricsReport, out_dir, figures: bool = True) -> dict[str, Path]:
    """``metrics.json``, ``metrics.txt`` and, optionally, three PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"json": out_dir / "metrics.json", "text": out_dir / "metrics.txt"}
    written["json"].write_text(report.to_json())
    written["text"].write_text(report.to_text())
    if figures:
        written["confusion"] = plot_confusion(report.confusion, report.class_names, out_dir / "confusion.png")
        if report.folds:
            written["folds"] = plot_fold_accuracy(report, out_dir / "fold_accuracy.png")
            written["loss"] = plot_loss_curves(report, out_dir / "loss_curves.png")
    return written
