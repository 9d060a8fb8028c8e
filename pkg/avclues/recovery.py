import logging
from typing import Dict, List, Optional

import attr
import numpy as np
import torch

from avclues.feature_store import DatasetManifest, FeatureDataset, load_manifest, load_truth
from avclues.model import MCDNet
from avclues.trainer import load_checkpoint, make_loader

logger = logging.getLogger(__name__)

MODALITIES = ("visual", "audio")
SCENARIO_MODALITIES = {
    "audio": ("audio",),
    "visual": ("visual",),
    "audio-visual": ("visual", "audio"),
}


def recovery_fraction(selected: np.ndarray, event_frames: np.ndarray) -> float:
    """
    Share of samples whose event frame is among their selected frame positions.

    :param selected: [N, m] selected frame positions.
    :param event_frames: [N] planted event frames.
    """
    selected = np.asarray(selected)
    event_frames = np.asarray(event_frames)
    if len(event_frames) == 0:
        raise ValueError("recovery_fraction needs at least one sample")
    if selected.shape[0] != event_frames.shape[0]:
        raise ValueError(
            f"{selected.shape[0]} selections for {event_frames.shape[0]} event frames"
        )
    return float((selected == event_frames[:, None]).any(axis=1).mean())


@attr.s
class RecoveryReport:
    """
    :param referenced: Recovery per modality over the samples whose question
        type references that modality.
    :param all_samples: Recovery per modality over every sample.
    :param chance: floor(k / 2) / k, the expectation of a uniform selection.
    """

    referenced: Dict[str, Optional[float]] = attr.ib()
    referenced_count: Dict[str, int] = attr.ib()
    all_samples: Dict[str, float] = attr.ib()
    chance: float = attr.ib()
    count: int = attr.ib()
    split: str = attr.ib()

    def to_dict(self) -> dict:
        return attr.asdict(self)


def modalities_for_type(manifest: DatasetManifest, type_id: int) -> tuple:
    name = manifest.question_type_names[type_id]
    return SCENARIO_MODALITIES.get(manifest.question_type_scenarios.get(name), MODALITIES)


@torch.no_grad()
def selected_frames(model: MCDNet, loader, config) -> Dict[str, object]:
    """
    Frame positions kept by the clue selection on the association-stack output,
    mapped back through the sampled frame indices.
    """
    model.eval()
    sample_ids: List[str] = list()
    type_ids: List[np.ndarray] = list()
    picks = {modality: list() for modality in MODALITIES}
    for batch in loader:
        batch = batch.to(config.train.device, config.train.torch_dtype)
        aggregate = model(batch).aggregate
        sample_ids.extend(batch.sample_ids)
        type_ids.append(batch.type_ids.cpu().numpy())
        for modality in MODALITIES:
            clues = getattr(aggregate, modality)
            positions = clues.frame_index.gather(1, clues.late.indices)
            picks[modality].append(positions.cpu().numpy())

    return {
        "sample_ids": sample_ids,
        "type_ids": np.concatenate(type_ids),
        **{modality: np.concatenate(picks[modality]) for modality in MODALITIES},
    }


def clue_recovery(data_dir, checkpoint, split: str = "test") -> RecoveryReport:
    """
    Checks per sample whether the planted event frame is among the selected
    Top-k/2 frames of each modality.

    :raises FileNotFoundError: without a ``truth.json`` sidecar.
    """
    truth = load_truth(data_dir)
    manifest = load_manifest(data_dir)
    model, config, _ = load_checkpoint(checkpoint)
    if not isinstance(model, MCDNet):
        raise ValueError(f"Clue recovery needs a full model, checkpoint holds {config.mode.label}")

    dataset = FeatureDataset(data_dir, split, manifest)
    if len(dataset) == 0:
        raise ValueError(f"Split {split!r} of {data_dir} is empty")
    picks = selected_frames(model, make_loader(dataset, config, shuffle=False), config)

    missing = [sample_id for sample_id in picks["sample_ids"] if sample_id not in truth]
    if missing:
        raise KeyError(f"truth.json has no entry for {missing[0]} and {len(missing) - 1} more")
    events = np.array([truth[sample_id]["event_frame"] for sample_id in picks["sample_ids"]])

    referenced, referenced_count, all_samples = dict(), dict(), dict()
    for modality in MODALITIES:
        all_samples[modality] = recovery_fraction(picks[modality], events)
        members = np.array(
            [modality in modalities_for_type(manifest, int(t)) for t in picks["type_ids"]]
        )
        referenced_count[modality] = int(members.sum())
        referenced[modality] = (
            recovery_fraction(picks[modality][members], events[members]) if members.any() else None
        )

    k = min(config.model.frames, dataset[0].visual.shape[0])
    report = RecoveryReport(
        referenced=referenced,
        referenced_count=referenced_count,
        all_samples=all_samples,
        chance=max(k // 2, 1) / k,
        count=len(events),
        split=split,
    )
    logger.info("Clue recovery on %s: %s", split, report.referenced)
    return report
