import pytest
import torch

from avclues.config import (
    DETERMINISTIC_ENV,
    AblationMode,
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    deterministic_backend,
    fingerprint,
    load_config,
    mode_names,
    seed_everything,
)


class TestAblationMode:
    def test_default_label(self):
        assert AblationMode().label == "default"

    def test_composite_label(self):
        mode = AblationMode(fusion="concat", attention="off", loss_drop={"av", "distill_v"}, depth=2)

        assert mode.label == "fusion-concat+att-off+no-av+no-distill_v+depth-2"

    def test_baseline_label(self):
        assert AblationMode(inputs="qv").label == "baseline-qv"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"fusion": "multiply"},
            {"attention": "sideways"},
            {"loss_drop": {"answer"}},
            {"lef_drop": {"F_q"}},
            {"inputs": "x"},
            {"depth": 0},
        ],
    )
    def test_rejects_unknown_values(self, kwargs):
        with pytest.raises(ConfigError):
            AblationMode(**kwargs)

    def test_duplicate_labels(self):
        with pytest.raises(ConfigError):
            mode_names([AblationMode(loss_drop=["av"]), AblationMode(loss_drop={"av"})])


class TestLoading:
    def test_defaults(self):
        config = load_config()

        assert config == RunConfig()
        assert config.model.n_blocks == 2
        assert config.train.lr == 1e-3

    def test_yaml_and_overrides(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("model:\n  dim: 32\ntrain:\n  epochs: 3\n")

        config = load_config(str(path), ["train.lr=1e-4", "mode.loss_drop=[av]"])

        assert config.model.dim == 32
        assert config.train.epochs == 3
        assert config.train.lr == 1e-4
        assert config.mode.loss_drop == frozenset({"av"})

    def test_exponent_literals_from_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  lr: 1e-4\n  grad_clip: 5e0\nmodel:\n  dropout: 0\n")

        config = load_config(str(path))

        assert config.train.lr == 1e-4
        assert isinstance(config.train.lr, float)
        assert config.train.grad_clip == 5.0
        assert config.model.dropout == 0.0

    def test_integer_fields_are_converted(self):
        config = load_config(None, ["model.dim=64.0", "train.epochs=1e1"])

        assert config.model.dim == 64
        assert isinstance(config.model.dim, int)
        assert config.train.epochs == 10

    @pytest.mark.parametrize(
        "override",
        ["train.lr=abc", "train.epochs=2.5", "model.dim=[8]", "train.seed=true"],
    )
    def test_non_numeric_value(self, override):
        with pytest.raises(ConfigError):
            load_config(None, [override])

    @pytest.mark.parametrize("override", ["train.lr", "lr=1", "solver.lr=1"])
    def test_malformed_override(self, override):
        with pytest.raises(ConfigError):
            apply_overrides(dict(), [override])

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"width": 3}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config_from_dict({"optimizer": {}})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            config_from_dict({"model": {"n_blocks": 0}})

    def test_depth_override(self):
        config = RunConfig(mode=AblationMode(depth=3))

        assert config.model_for_mode.n_blocks == 3
        assert config.model.n_blocks == 2


class TestFingerprint:
    def test_stable(self):
        assert fingerprint(RunConfig()) == fingerprint(config_from_dict(RunConfig().to_dict()))

    def test_sensitive_to_mode(self):
        assert fingerprint(RunConfig()) != fingerprint(RunConfig(mode=AblationMode(depth=1)))


class TestSeeding:
    def test_generator_is_seeded(self):
        first = torch.randint(0, 1000, (5,), generator=seed_everything(4))
        second = torch.randint(0, 1000, (5,), generator=seed_everything(4))

        assert torch.equal(first, second)

    @pytest.mark.parametrize("value, expected", [("1", True), ("0", False), ("", False)])
    def test_deterministic_flag(self, monkeypatch, value, expected):
        monkeypatch.setenv(DETERMINISTIC_ENV, value)

        assert deterministic_backend() is expected
