"""Merging of training records into one table plus per-model loss-curve files."""
import csv
import json
import logging
import os
import re
from typing import Iterable, List, Optional, Tuple

from errors import ConfigError
from training import TrainRecord

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ["model_id", "epochs", "stop_reason", "best_epoch", "initial_val_loss", "best_val_loss",
                  "final_train_loss", "final_val_loss"]


def merge_records(records: Iterable[TrainRecord]) -> Tuple[List[TrainRecord], List[str]]:
    """First record per model id wins; later duplicates are dropped with a warning."""
    seen = set()
    merged, dropped = [], []
    for rec in records:
        if rec.model_id in seen:
            logger.warning("duplicate model id %r: keeping the first record", rec.model_id)
            dropped.append(rec.model_id)
            continue
        seen.add(rec.model_id)
        merged.append(rec)
    return merged, dropped


def load_records(paths: Iterable[str]) -> List[TrainRecord]:
    """Accepts record JSON files and ablation summaries (``{"records": [...]}``)."""
    out = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as f:
            raw = json.load(f)
        items = raw.get("records", [raw]) if isinstance(raw, dict) else raw
        out.extend(TrainRecord.from_dict(r) for r in items)
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_summary(records: List[TrainRecord], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in records:
            w.writerow([r.model_id, r.epochs, r.stop_reason, r.best_epoch, _fmt(r.initial_val_loss),
                        _fmt(r.best_val_loss), _fmt(r.train_loss[-1] if r.train_loss else None),
                        _fmt(r.val_loss[-1] if r.val_loss else None)])


def curve_filename(model_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", model_id) or "model"


def write_curves(records: List[TrainRecord], out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for r in records:
        p = os.path.join(out_dir, curve_filename(r.model_id) + ".csv")
        r.to_csv(p)
        paths.append(p)
    return paths


def plot_curves(records: List[TrainRecord], path: str, title: Optional[str] = None):
    """Validation (solid) and training (dashed) loss per model on a log axis, saved as PNG."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("matplotlib is required for --plot (pip install matplotlib)")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for r in records:
        epochs = range(1, r.epochs + 1)
        line, = ax.plot(epochs, r.val_loss, label=r.model_id)
        ax.plot(epochs, r.train_loss, linestyle="--", color=line.get_color(), alpha=0.6)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    if title:
        ax.set_title(title)
    if records:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
