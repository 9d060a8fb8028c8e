import os

import pytest
import torch
from redislite import StrictRedis

from avclues.config import AblationMode, ModelConfig, RunConfig, TrainConfig
from avclues.feature_store import FeatureBundle, collate_bundles, load_manifest
from avclues.synthetic import SyntheticSpec, generate_synthetic_dataset
from avclues.telemetry import Counter, Gauge, Histogram, TelemetryRegistry


def pytest_collection_modifyitems(config, items):
    if os.environ.get("AVCLUES_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set AVCLUES_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def redis():
    return StrictRedis(db=0)


@pytest.fixture()
def registry(redis) -> TelemetryRegistry:
    redis.delete("testing")
    return TelemetryRegistry(redis_client=redis, namespace="testing")


@pytest.fixture()
def local_registry() -> TelemetryRegistry:
    return TelemetryRegistry(namespace="testing")


@pytest.fixture()
def counter(registry: TelemetryRegistry):
    counter = Counter(
        name="avclues_train_steps_total",
        description="Optimizer steps",
        allowed_labels=["mode", "split"],
    )
    registry.register(counter)
    return counter


@pytest.fixture()
def gauge(registry: TelemetryRegistry):
    gauge = Gauge(
        name="avclues_loss",
        description="Mean loss of the last epoch",
        allowed_labels=["mode", "component"],
    )
    registry.register(gauge)
    return gauge


@pytest.fixture()
def histogram(registry: TelemetryRegistry):
    histogram = Histogram(
        name="avclues_epoch_seconds",
        description="Wall time of one epoch",
        buckets=[0.1, 0.2, 0.4, 0.8, 1.6],
        allowed_labels=["mode"],
    )
    registry.register(histogram)
    return histogram


@pytest.fixture(scope="session")
def synthetic_spec() -> SyntheticSpec:
    return SyntheticSpec(
        n_samples=96, frames=6, dim=16, n_answer_classes=4, noise_sigma=0.3, seed=7,
        val_fraction=1 / 6, test_fraction=1 / 6,
    )


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory, synthetic_spec):
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic_dataset(synthetic_spec, out)
    return out


@pytest.fixture(scope="session")
def manifest(synthetic_dir):
    return load_manifest(synthetic_dir)


@pytest.fixture()
def tiny_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(dim=16, n_blocks=1, frames=6, dropout=0.0, question_max_len=6),
        train=TrainConfig(epochs=2, batch_size=16, seed=3),
        mode=AblationMode(),
    )


@pytest.fixture()
def tiny_batch() -> callable:
    """Builds a random FeatureBatch compatible with the synthetic vocabulary."""

    def make(batch: int = 4, length: int = 6, dim: int = 16, seed: int = 0, answers: int = 4):
        generator = torch.Generator().manual_seed(seed)
        bundles = [
            FeatureBundle(
                sample_id=f"s{i}",
                visual=torch.randn(length, dim, generator=generator).numpy(),
                audio=torch.randn(length, dim, generator=generator).numpy(),
                question_tokens=[1, 2, 3, 4, 12 + i % 8],
                type_id=i % 3,
                keyword_ids=[1 + i % 8],
                answer_id=i % answers,
            )
            for i in range(batch)
        ]
        return collate_bundles(bundles, question_max_len=6)

    return make
