import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

SUMMARY_FILE = "curves_summary.json"
OVERVIEW_FILE = "test_accuracy.png"
# Software metadata carries the matplotlib version; left out so reruns match.
PNG_METADATA = {"Software": None}


class TraceFormatError(ValueError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


def load_trace(path) -> dict:
    """
    Reads a training trace and checks the fields the curves need.

    :raises TraceFormatError: naming the file on malformed content.
    """
    try:
        with open(path, encoding="utf-8") as fp:
            trace = json.load(fp)
    except (OSError, json.JSONDecodeError) as e:
        raise TraceFormatError(path, f"cannot read trace: {e}")

    if not isinstance(trace, dict) or not isinstance(trace.get("mode"), str):
        raise TraceFormatError(path, "missing mode label")
    epochs = trace.get("epochs")
    if not isinstance(epochs, list) or not epochs:
        raise TraceFormatError(path, "no epoch records")
    for record in epochs:
        if not isinstance(record, dict) or not {"epoch", "val_acc", "test_acc"} <= set(record):
            raise TraceFormatError(path, f"epoch record lacks epoch, val_acc or test_acc: {record!r}")
    return trace


def summarize(trace: dict) -> dict:
    """Best validation epoch (first on ties) and final test accuracy."""
    epochs = trace["epochs"]
    with_val = [record for record in epochs if record["val_acc"] is not None]
    best = max(with_val, key=lambda record: record["val_acc"]) if with_val else None
    return {
        "epochs": len(epochs),
        "best_val_epoch": best["epoch"] if best else None,
        "best_val_acc": best["val_acc"] if best else None,
        "test_at_best_val": best["test_acc"] if best else None,
        "final_test_acc": epochs[-1]["test_acc"],
    }


def _series(trace: dict, key: str):
    points = [(r["epoch"], r[key]) for r in trace["epochs"] if r[key] is not None]
    return [p[0] for p in points], [p[1] for p in points]


def _plot_mode(trace: dict, path: Path) -> None:
    fig, ax = plt.subplots(1, 1, figsize=(6.4, 4.0), dpi=100)
    for key, style in (("val_acc", "-o"), ("test_acc", "--s")):
        epochs, values = _series(trace, key)
        ax.plot(epochs, values, style, markersize=3, label=key.replace("_acc", ""))
    ax.set_title(trace["mode"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.savefig(path, bbox_inches="tight", metadata=PNG_METADATA)
    plt.close(fig)


def _plot_overview(traces: List[dict], path: Path) -> None:
    fig, ax = plt.subplots(1, 1, figsize=(8.0, 4.8), dpi=100)
    for trace in traces:
        epochs, values = _series(trace, "test_acc")
        ax.plot(epochs, values, label=trace["mode"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize="small")
    fig.savefig(path, bbox_inches="tight", metadata=PNG_METADATA)
    plt.close(fig)


def emit_curves(trace_paths: Sequence, out_dir) -> Dict[str, dict]:
    """
    Plots validation and test accuracy against epoch for every trace, one PNG
    per mode plus an overview of the test curves, and writes the per-mode
    summary JSON.

    :param trace_paths: ``trace.json`` files, at least one.
    :param out_dir: Output directory.
    :return: Summary keyed by mode label.
    """
    if not trace_paths:
        raise ValueError("emit_curves needs at least one trace")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    traces = list()
    summary = dict()
    for path in trace_paths:
        trace = load_trace(path)
        if trace["mode"] in summary:
            raise TraceFormatError(path, f"mode {trace['mode']} appears in more than one trace")
        summary[trace["mode"]] = summarize(trace)
        traces.append(trace)
        _plot_mode(trace, out_dir / f"{trace['mode']}.png")

    _plot_overview(traces, out_dir / OVERVIEW_FILE)
    with open(out_dir / SUMMARY_FILE, "w", encoding="utf-8") as fp:
        json.dump(summary, fp, indent=2, sort_keys=True)
        fp.write("\n")

    logger.info("Wrote curves for %d modes to %s", len(traces), out_dir)
    return summary
