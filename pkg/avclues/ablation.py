"""
Ablation grids and the runner training one model per mode.

Every mode of a run trains from the same base config, so seed and data order are
shared. Modes are validated before the first model trains.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import attr

from avclues.config import (
    ATTENTION_MODES,
    FUSION_MODES,
    AblationMode,
    ConfigError,
    RunConfig,
    mode_names,
)
from avclues.curves import emit_curves, summarize
from avclues.feature_store import load_manifest
from avclues.trainer import TRACE_FILE, evaluate_model, fit

logger = logging.getLogger(__name__)

REPORT_FILE = "ablation_report.json"
CURVES_DIR = "curves"
DEPTHS = (1, 2, 3)
BASELINE_INPUTS = ("q", "a", "v", "qa", "qv", "qav")


def _attention_grid() -> List[AblationMode]:
    return [AblationMode(attention=attention) for attention in ATTENTION_MODES]


def _fusion_grid() -> List[AblationMode]:
    return [AblationMode(fusion=fusion) for fusion in FUSION_MODES]


def _element_grid() -> List[AblationMode]:
    return [
        AblationMode(),
        AblationMode(element_fusion="add_only"),
        AblationMode(lef_drop={"F_v"}),
        AblationMode(lef_drop={"F_a"}),
        AblationMode(lef_drop={"F_v", "F_a"}),
        AblationMode(lef_drop={"text_object"}),
    ]


def _loss_grid() -> List[AblationMode]:
    return [
        AblationMode(),
        AblationMode(loss_drop={"distill_v"}),
        AblationMode(loss_drop={"distill_a"}),
        AblationMode(loss_drop={"distill_v", "distill_a"}),
        AblationMode(loss_drop={"av"}),
        AblationMode(loss_drop={"distill_v", "distill_a", "av"}),
    ]


def _modality_grid() -> List[AblationMode]:
    return [AblationMode(inputs=inputs) for inputs in BASELINE_INPUTS] + [AblationMode()]


def _depth_grid() -> List[AblationMode]:
    return [AblationMode(depth=depth) for depth in DEPTHS]


GRIDS = {
    "attention": _attention_grid,
    "fusion": _fusion_grid,
    "element": _element_grid,
    "loss": _loss_grid,
    "modality": _modality_grid,
    "depth": _depth_grid,
}


def ablation_grid(name: str) -> List[AblationMode]:
    """
    Modes of a named grid. ``all`` joins every grid, keeping the first
    occurrence of each label.
    """
    if name == "all":
        merged = dict()
        for grid in GRIDS.values():
            for mode in grid():
                merged.setdefault(mode.label, mode)
        return list(merged.values())
    if name not in GRIDS:
        raise ConfigError(f"Unknown ablation grid {name!r}; known: all, {', '.join(GRIDS)}")
    return GRIDS[name]()


def resolve_modes(items: Sequence[Union[str, AblationMode]]) -> List[AblationMode]:
    """
    Expands grid names and checks the result: every entry must be a mode or a
    known grid name, and no label may repeat.
    """
    modes = list()
    for item in items:
        if isinstance(item, AblationMode):
            modes.append(item)
        elif isinstance(item, str):
            modes.extend(ablation_grid(item))
        else:
            raise ConfigError(f"Not an ablation mode: {item!r}")
    if not modes:
        raise ConfigError("No ablation modes requested")
    return list(mode_names(modes).values())


@attr.s
class AblationRow:
    mode: str = attr.ib()
    wiring: dict = attr.ib()
    best_val_epoch: Optional[int] = attr.ib()
    best_val_acc: Optional[float] = attr.ib()
    final_test_acc: Optional[float] = attr.ib()
    test: Optional[dict] = attr.ib()


def run_ablation(data_dir, base_config: RunConfig, modes: Sequence[Union[str, AblationMode]], out_dir, redis_client=None) -> Dict[str, object]:
    """
    Trains and evaluates one model per mode under ``out_dir/<label>`` and writes
    the comparison report and accuracy curves.

    :param data_dir: Feature directory.
    :param base_config: Config shared by every mode; its own mode is ignored.
    :param modes: Modes or grid names.
    :param out_dir: Output directory.
    :raises ConfigError: on unknown or duplicate modes, before any training.
    :return: The report written to ``ablation_report.json``.
    """
    resolved = resolve_modes(modes)
    manifest = load_manifest(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = list()
    trace_paths = list()
    for number, mode in enumerate(resolved, start=1):
        logger.info("Ablation %d/%d: %s", number, len(resolved), mode.label)
        config = base_config.with_mode(mode)
        run_dir = out_dir / mode.label
        result = fit(data_dir, config, run_dir, redis_client=redis_client)
        trace_paths.append(run_dir / TRACE_FILE)

        test_report = None
        if manifest.split("test"):
            test_report = evaluate_model(result.model, data_dir, "test", config, manifest).to_dict()

        summary = summarize(result.trace)
        rows.append(
            AblationRow(
                mode=mode.label,
                wiring=mode.to_dict(),
                best_val_epoch=summary["best_val_epoch"],
                best_val_acc=summary["best_val_acc"],
                final_test_acc=summary["final_test_acc"],
                test=test_report,
            )
        )

    report = {
        "seed": base_config.train.seed,
        "epochs": base_config.train.epochs,
        "rows": [attr.asdict(row) for row in rows],
    }
    with open(out_dir / REPORT_FILE, "w", encoding="utf-8") as fp:
        json.dump(report, fp, indent=2, sort_keys=True)
        fp.write("\n")

    emit_curves(trace_paths, out_dir / CURVES_DIR)
    return report
