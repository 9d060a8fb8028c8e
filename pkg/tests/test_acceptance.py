"""
Learning checks on the full-size planted-clue benchmark. They train for
minutes, so they only run with AVCLUES_RUN_SLOW=1.
"""
from pathlib import Path

import attr
import pytest

from avclues.config import AblationMode, load_config
from avclues.recovery import clue_recovery
from avclues.synthetic import SyntheticSpec, generate_synthetic_dataset
from avclues.trainer import evaluate, fit

pytestmark = pytest.mark.slow

N_CLASSES = 8
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    spec = SyntheticSpec(n_samples=6500, val_fraction=500 / 6500, test_fraction=1000 / 6500, seed=7)
    assert spec.split_sizes() == {"train": 5000, "val": 500, "test": 1000}
    generate_synthetic_dataset(spec, out)
    return out


@pytest.fixture(scope="module")
def config():
    return load_config(str(CONFIGS / "synthetic.yaml"))


@pytest.fixture(scope="module")
def trained(benchmark, config, tmp_path_factory):
    return fit(benchmark, config, tmp_path_factory.mktemp("default"))


def test_default_model_learns(benchmark, trained):
    report = evaluate(benchmark, "test", trained.best_checkpoint)

    assert report.overall >= 0.95


def test_question_only_stays_near_chance(benchmark, config, tmp_path):
    baseline = attr.evolve(config, mode=AblationMode(inputs="q"))

    result = fit(benchmark, baseline, tmp_path)

    assert evaluate(benchmark, "test", result.best_checkpoint).overall <= 1 / N_CLASSES + 0.05


def test_clues_land_on_planted_frames(benchmark, trained):
    report = clue_recovery(benchmark, trained.best_checkpoint, "test")

    for modality, fraction in report.referenced.items():
        assert fraction >= 0.90, modality
