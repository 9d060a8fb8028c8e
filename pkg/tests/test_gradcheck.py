import numpy as np
import pytest

from avclues.config import AblationMode, RunConfig
from avclues.gradcheck import (
    MICRO_VOCAB,
    GradcheckError,
    TOLERANCE,
    gradcheck,
    micro_config,
    relative_error,
)
from avclues.model import build_model


def corrupt_classifier(name, grad):
    return grad * 1.01 if name == "head.classifier.weight" else grad


class TestRelativeError:
    def test_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9])).item() == pytest.approx(1e-3)

    def test_symmetric(self):
        assert relative_error(np.array([2.0]), np.array([1.0])).item() == 0.5
        assert relative_error(np.array([1.0]), np.array([2.0])).item() == 0.5


class TestMicroConfig:
    def test_sizes(self):
        config = micro_config(RunConfig(mode=AblationMode(depth=3, fusion="concat")))

        assert config.model.dim == 8
        assert config.model.n_blocks == 1
        assert config.model.dropout == 0.0
        assert config.train.dtype == "float64"
        assert config.mode.fusion == "concat"
        assert config.mode.depth is None

    @pytest.mark.parametrize("fusion", ["add", "concat"])
    def test_late_fusion_dropout_is_off(self, fusion):
        config = micro_config(RunConfig(mode=AblationMode(fusion=fusion)))

        model = build_model(config, MICRO_VOCAB)

        assert model.head.late_dropout.p == 0.0


class TestGradcheck:
    def test_default_model_passes(self):
        report = gradcheck()

        assert report.passed, report.failing
        assert report.max_rel_err <= TOLERANCE
        assert {check.name for check in report.tensors} >= {
            "head.classifier.weight",
            "projector.layers.0.weight",
            "stack.blocks.0.residual_v.bn_mix.weight",
        }

    @pytest.mark.parametrize(
        "mode",
        [AblationMode(fusion="concat"), AblationMode(fusion="add"), AblationMode(attention="self_a")],
    )
    def test_ablations_pass(self, mode):
        assert gradcheck(RunConfig(mode=mode)).passed

    def test_corrupted_gradient_fails(self):
        report = gradcheck(corrupt=corrupt_classifier)

        assert report.failing == ["head.classifier.weight"]
        assert report.to_dict()["passed"] is False

    def test_raise_on_failure(self):
        with pytest.raises(GradcheckError) as info:
            gradcheck(corrupt=corrupt_classifier, raise_on_failure=True)

        assert "head.classifier.weight" in str(info.value)
        assert not info.value.report.passed
