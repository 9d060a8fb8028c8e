"""
Planted-clue benchmark.

Every sample hides one event frame t* in an otherwise pure-noise clip. The visual
and audio rows at t* are a class prototype plus Gaussian noise, the question
names a type and carries a keyword, and the answer is a fixed function of the
type and the planted class. Labels are balanced per split and independent of the
question tokens given the type, so the question alone answers at chance.

The answer does not depend on t*, and both streams carry the same class at t*.
Any question type is therefore answerable from either stream, and the
audio / visual / audio-visual scenario tags only name the type groups used for
per-scenario accuracy and clue recovery. They say nothing about which stream
holds the answer.

Randomness comes from numpy's Philox4x64-10 counter-based bit generator keyed by
the SyntheticSpec seed. Draws happen in a fixed order (prototypes, then per split: answer
permutation, then per sample: type, keyword, event frame, visual noise, audio
noise), so the output bytes depend on the SyntheticSpec alone.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List

import attr
import numpy as np

from avclues.feature_store import (
    FORMAT_VERSION,
    MANIFEST_VERSION,
    TRUTH_FILE,
    DatasetManifest,
    FeatureBundle,
    SampleEntry,
    VocabSizes,
    sample_filename,
    write_manifest,
    write_sample,
)

logger = logging.getLogger(__name__)

SAMPLES_DIR = "samples"

QUESTION_TYPES = ("audio-count", "visual-class", "av-temporal")
QUESTION_SCENARIOS = {
    "audio-count": "audio",
    "visual-class": "visual",
    "av-temporal": "audio-visual",
}
# Fixed token templates, one per question type. Id 0 is padding.
QUESTION_TEMPLATES = (
    (1, 2, 3, 4),
    (5, 6, 7, 4),
    (8, 9, 10, 11, 4),
)
TEMPLATE_VOCAB = 12
N_KEYWORDS = 8
# answer = (class + offset[type]) mod n_answer_classes
ANSWER_OFFSETS = (0, 1, 2)


def _nonnegative(instance, attribute, value):
    if value < 0:
        raise ValueError(f"{attribute.name} must be nonnegative, got {value}")


@attr.s(frozen=True)
class SyntheticSpec:
    """
    :param n_samples: Total number of samples over all splits.
    :param frames: Frames k per modality.
    :param dim: Feature width D.
    :param n_answer_classes: Size of the answer vocabulary; also the number of
        planted prototype classes.
    :param noise_sigma: Standard deviation of the Gaussian noise.
    :param seed: Philox key.
    :param val_fraction: Share of samples in the val split.
    :param test_fraction: Share of samples in the test split.
    """

    n_samples: int = attr.ib()
    frames: int = attr.ib(default=12)
    dim: int = attr.ib(default=64)
    n_answer_classes: int = attr.ib(default=8)
    noise_sigma: float = attr.ib(default=0.5, validator=_nonnegative)
    seed: int = attr.ib(default=7, validator=_nonnegative)
    val_fraction: float = attr.ib(default=0.1, validator=_nonnegative)
    test_fraction: float = attr.ib(default=0.1, validator=_nonnegative)

    @n_samples.validator
    def _check_samples(self, attribute, value):
        if value < 1:
            raise ValueError(f"n_samples must be at least 1, got {value}")

    @frames.validator
    def _check_frames(self, attribute, value):
        if value < 2:
            raise ValueError(f"frames must be at least 2, got {value}")

    @dim.validator
    def _check_dim(self, attribute, value):
        if value < 1:
            raise ValueError(f"dim must be at least 1, got {value}")

    @n_answer_classes.validator
    def _check_classes(self, attribute, value):
        if value < 2:
            raise ValueError(f"n_answer_classes must be at least 2, got {value}")

    @test_fraction.validator
    def _check_fractions(self, attribute, value):
        if self.val_fraction + value >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave a train split")

    def split_sizes(self) -> Dict[str, int]:
        n_val = int(round(self.n_samples * self.val_fraction))
        n_test = int(round(self.n_samples * self.test_fraction))
        return {
            "train": self.n_samples - n_val - n_test,
            "val": n_val,
            "test": n_test,
        }


def vocab_sizes(spec: SyntheticSpec) -> VocabSizes:
    return VocabSizes(
        token=TEMPLATE_VOCAB + N_KEYWORDS,
        type=len(QUESTION_TYPES),
        keyword=N_KEYWORDS + 1,
        answer=spec.n_answer_classes,
    )


def answer_for(type_id: int, event_class: int, n_answer_classes: int) -> int:
    return (event_class + ANSWER_OFFSETS[type_id]) % n_answer_classes


def class_for(type_id: int, answer_id: int, n_answer_classes: int) -> int:
    return (answer_id - ANSWER_OFFSETS[type_id]) % n_answer_classes


def question_tokens(type_id: int, keyword_id: int) -> List[int]:
    return list(QUESTION_TEMPLATES[type_id]) + [TEMPLATE_VOCAB + keyword_id - 1]


def _balanced_answers(rng: np.random.Generator, size: int, n_classes: int, split: str) -> np.ndarray:
    if size % n_classes:
        logger.warning(
            "Split %s has %d samples which is not a multiple of %d classes; "
            "class counts will differ by one",
            split,
            size,
            n_classes,
        )
    return rng.permutation(np.arange(size) % n_classes)


def _clip(rng: np.random.Generator, prototype: np.ndarray, event_frame: int, spec: SyntheticSpec) -> np.ndarray:
    clip = spec.noise_sigma * rng.standard_normal((spec.frames, spec.dim))
    clip[event_frame] += prototype
    return clip.astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """
    Writes a planted-clue dataset: one MCDF file per sample under ``samples/``,
    ``manifest.json`` and the ``truth.json`` sidecar with event frame and class of
    every sample.

    :param spec: SyntheticSpec
    :param out_dir: Output directory, created when missing.
    :return: DatasetManifest
    """
    out_dir = Path(out_dir)
    samples_dir = out_dir / SAMPLES_DIR
    samples_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    visual_prototypes = rng.standard_normal((spec.n_answer_classes, spec.dim))
    audio_prototypes = rng.standard_normal((spec.n_answer_classes, spec.dim))
    sizes = vocab_sizes(spec)

    entries = list()
    truth = dict()

    for split, size in spec.split_sizes().items():
        answers = _balanced_answers(rng, size, spec.n_answer_classes, split)
        for index in range(size):
            sample_id = f"{split}-{index:06d}"
            answer_id = int(answers[index])
            type_id = int(rng.integers(len(QUESTION_TYPES)))
            keyword_id = int(rng.integers(1, N_KEYWORDS + 1))
            event_frame = int(rng.integers(spec.frames))
            event_class = class_for(type_id, answer_id, spec.n_answer_classes)

            bundle = FeatureBundle(
                sample_id=sample_id,
                visual=_clip(rng, visual_prototypes[event_class], event_frame, spec),
                audio=_clip(rng, audio_prototypes[event_class], event_frame, spec),
                question_tokens=question_tokens(type_id, keyword_id),
                type_id=type_id,
                keyword_ids=[keyword_id],
                answer_id=answer_id,
            )
            write_sample(bundle, samples_dir, sizes)

            entries.append(
                SampleEntry(sample_id, f"{SAMPLES_DIR}/{sample_filename(sample_id)}", split)
            )
            truth[sample_id] = {"event_frame": event_frame, "class": event_class}

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        dim=spec.dim,
        vocab_sizes=sizes,
        question_type_names=list(QUESTION_TYPES),
        samples=entries,
        question_type_scenarios=dict(QUESTION_SCENARIOS),
    )
    write_manifest(manifest, out_dir)

    with open(out_dir / TRUTH_FILE, "w", encoding="utf-8") as fp:
        json.dump(truth, fp, indent=2, sort_keys=True)
        fp.write("\n")

    logger.info(
        "Generated %d samples (format v%d) in %s", len(entries), FORMAT_VERSION, out_dir
    )
    return manifest
