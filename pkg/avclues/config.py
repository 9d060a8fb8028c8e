import hashlib
import json
import logging
import os
import random
from typing import Dict, FrozenSet, Iterable, List, Optional

import attr
import numpy as np
import torch
import yaml

logger = logging.getLogger(__name__)

DETERMINISTIC_ENV = "AVCLUES_DETERMINISTIC"

FUSION_MODES = ("none", "concat", "add")
ATTENTION_MODES = (
    "off",
    "self_a",
    "self_v",
    "self_av",
    "cross_aq",
    "cross_vq",
    "cross_both",
    "bidir_aq",
    "bidir_vq",
    "bidir_full",
)
LOSS_TERMS = ("distill_v", "distill_a", "av")
LEF_TERMS = ("F_v", "F_a", "text_object")
ELEMENT_FUSION_MODES = ("add_only", "add_dot")
INPUT_MODES = ("mcd", "q", "a", "v", "qa", "qv", "qav")


class ConfigError(ValueError):
    """Raised on unknown config keys or values outside their declared range."""


def _one_of(choices):
    def validator(instance, attribute, value):
        if value not in choices:
            raise ConfigError(
                f"{attribute.name}={value!r} is not one of {', '.join(choices)}"
            )

    return validator


def _subset_of(choices):
    def validator(instance, attribute, value):
        unknown = set(value) - set(choices)
        if unknown:
            raise ConfigError(
                f"{attribute.name} contains unknown entries {sorted(unknown)}; "
                f"allowed: {', '.join(choices)}"
            )

    return validator


def _positive(instance, attribute, value):
    if value is not None and value <= 0:
        raise ConfigError(f"{attribute.name} must be positive, got {value}")


def _number(kind, name, optional=False):
    """Converter for numeric fields; YAML 1.1 leaves values like ``1e-4`` as str."""

    def convert(value):
        if value is None and optional:
            return None
        if isinstance(value, bool):
            raise ConfigError(f"{name}={value!r} is not a number")
        if kind is int and isinstance(value, int):
            return value
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}={value!r} is not a number") from None
        if kind is int:
            if not number.is_integer():
                raise ConfigError(f"{name}={value!r} is not an integer")
            return int(number)
        return number

    return convert


@attr.s(frozen=True)
class AblationMode:
    """
    One wiring of the model for the ablation harness.

    :param fusion: Late fusion of the compressed audio-visual embeddings into the
        head input. ``none`` is the default design.
    :param attention: Which branches of the association blocks are active.
    :param loss_drop: Contrastive terms removed from the total loss.
    :param lef_drop: Terms removed from the local element fusion.
    :param element_fusion: ``add_dot`` is f̃_t ⊙ (f̃_t ⊕ F_v ⊕ F_a), ``add_only``
        drops the product.
    :param inputs: ``mcd`` for the full model, otherwise the modality subset fed
        to the plain MLP baseline.
    :param depth: Overrides the number of association blocks of the model config.
    """

    fusion: str = attr.ib(default="none", validator=_one_of(FUSION_MODES))
    attention: str = attr.ib(default="bidir_full", validator=_one_of(ATTENTION_MODES))
    loss_drop: FrozenSet[str] = attr.ib(
        default=frozenset(), converter=frozenset, validator=_subset_of(LOSS_TERMS)
    )
    lef_drop: FrozenSet[str] = attr.ib(
        default=frozenset(), converter=frozenset, validator=_subset_of(LEF_TERMS)
    )
    element_fusion: str = attr.ib(
        default="add_dot", validator=_one_of(ELEMENT_FUSION_MODES)
    )
    inputs: str = attr.ib(default="mcd", validator=_one_of(INPUT_MODES))
    depth: Optional[int] = attr.ib(
        default=None,
        converter=_number(int, "depth", optional=True),
        validator=_positive,
    )

    @property
    def label(self) -> str:
        """Stable, human readable name used for report rows and file names."""
        if self.inputs != "mcd":
            return f"baseline-{self.inputs}"

        parts = []
        if self.fusion != "none":
            parts.append(f"fusion-{self.fusion}")
        if self.attention != "bidir_full":
            parts.append(f"att-{self.attention}")
        for term in sorted(self.loss_drop):
            parts.append(f"no-{term}")
        for term in sorted(self.lef_drop):
            parts.append(f"lef-no-{term}")
        if self.element_fusion != "add_dot":
            parts.append(f"lef-{self.element_fusion}")
        if self.depth is not None:
            parts.append(f"depth-{self.depth}")

        return "+".join(parts) or "default"

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion,
            "attention": self.attention,
            "loss_drop": sorted(self.loss_drop),
            "lef_drop": sorted(self.lef_drop),
            "element_fusion": self.element_fusion,
            "inputs": self.inputs,
            "depth": self.depth,
        }


@attr.s
class ModelConfig:
    dim: int = attr.ib(default=512, converter=_number(int, "dim"), validator=_positive)
    n_blocks: int = attr.ib(default=2, converter=_number(int, "n_blocks"))
    heads: int = attr.ib(
        default=1, converter=_number(int, "heads"), validator=_positive
    )
    ffn_hidden: Optional[int] = attr.ib(
        default=None,
        converter=_number(int, "ffn_hidden", optional=True),
        validator=_positive,
    )
    frames: int = attr.ib(
        default=12, converter=_number(int, "frames"), validator=_positive
    )
    dropout: float = attr.ib(default=0.1, converter=_number(float, "dropout"))
    latent_dim: Optional[int] = attr.ib(
        default=None,
        converter=_number(int, "latent_dim", optional=True),
        validator=_positive,
    )
    early_pass: bool = attr.ib(default=True)
    clue_reduce: str = attr.ib(default="sum", validator=_one_of(("sum", "mean")))
    text_encoder: str = attr.ib(default="lstm", validator=_one_of(("lstm", "bilstm")))
    question_max_len: int = attr.ib(
        default=14, converter=_number(int, "question_max_len"), validator=_positive
    )
    frame_sampling: str = attr.ib(
        default="random", validator=_one_of(("random", "even"))
    )

    @n_blocks.validator
    def _check_n_blocks(self, attribute, value):
        if value < 1:
            raise ConfigError(f"n_blocks must be at least 1, got {value}")

    @dropout.validator
    def _check_dropout(self, attribute, value):
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {value}")

    @heads.validator
    def _check_heads(self, attribute, value):
        if self.dim % value:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {value}")

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or 2 * self.dim

    @property
    def latent_width(self) -> int:
        return self.latent_dim or self.dim


@attr.s
class TrainConfig:
    lr: float = attr.ib(
        default=1e-3, converter=_number(float, "lr"), validator=_positive
    )
    lr_decay_every: int = attr.ib(
        default=8, converter=_number(int, "lr_decay_every"), validator=_positive
    )
    lr_factor: float = attr.ib(
        default=0.1, converter=_number(float, "lr_factor"), validator=_positive
    )
    epochs: int = attr.ib(
        default=30, converter=_number(int, "epochs"), validator=_positive
    )
    batch_size: int = attr.ib(
        default=64, converter=_number(int, "batch_size"), validator=_positive
    )
    lambda_av: float = attr.ib(default=0.1, converter=_number(float, "lambda_av"))
    tau: float = attr.ib(
        default=0.1, converter=_number(float, "tau"), validator=_positive
    )
    seed: int = attr.ib(default=0, converter=_number(int, "seed"))
    weight_decay: float = attr.ib(default=0.0, converter=_number(float, "weight_decay"))
    grad_clip: Optional[float] = attr.ib(
        default=None,
        converter=_number(float, "grad_clip", optional=True),
        validator=_positive,
    )
    dtype: str = attr.ib(default="float32", validator=_one_of(("float32", "float64")))
    num_workers: int = attr.ib(default=0, converter=_number(int, "num_workers"))
    device: str = attr.ib(default="cpu")
    telemetry_redis_url: Optional[str] = attr.ib(default=None)
    telemetry_namespace: str = attr.ib(default="avclues")

    @lambda_av.validator
    def _check_lambda_av(self, attribute, value):
        if value < 0:
            raise ConfigError(f"lambda_av must be nonnegative, got {value}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@attr.s
class RunConfig:
    model: ModelConfig = attr.ib(factory=ModelConfig)
    train: TrainConfig = attr.ib(factory=TrainConfig)
    mode: AblationMode = attr.ib(factory=AblationMode)

    def to_dict(self) -> dict:
        return {
            "model": attr.asdict(self.model),
            "train": attr.asdict(self.train),
            "mode": self.mode.to_dict(),
        }

    def with_mode(self, mode: AblationMode) -> "RunConfig":
        return attr.evolve(self, mode=mode)

    @property
    def model_for_mode(self) -> ModelConfig:
        """The model config with the mode's depth override applied."""
        if self.mode.depth is None:
            return self.model
        return attr.evolve(self.model, n_blocks=self.mode.depth)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "mode": AblationMode}


def _build_section(name: str, values: dict):
    cls = _SECTIONS[name]
    known = {field.name for field in attr.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in section {name}: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(data: Optional[dict]) -> RunConfig:
    """
    Builds a RunConfig from a nested mapping such as a parsed YAML file.

    :param data: Mapping with optional ``model``, ``train`` and ``mode`` sections.
    :return: RunConfig
    """
    data = data or dict()
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config sections: {sorted(unknown)}")

    sections = {
        name: _build_section(name, data.get(name) or dict()) for name in _SECTIONS
    }
    return RunConfig(**sections)


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """
    Applies ``section.field=value`` overrides to a nested config mapping. Values
    are parsed as YAML scalars so ``train.lr=1e-4`` and ``mode.loss_drop=[av]``
    both work.

    :param data: Nested config mapping, modified in place.
    :param overrides: Override expressions.
    :return: The updated mapping.
    """
    for override in overrides:
        key, sep, raw_value = override.partition("=")
        section, dot, field = key.strip().partition(".")
        if not sep or not dot or not field:
            raise ConfigError(
                f"Override {override!r} is not of the form section.field=value"
            )
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown config section {section!r} in {override!r}")
        data.setdefault(section, dict())[field] = yaml.safe_load(raw_value)

    return data


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    Loads the declarative YAML config file (optional) and applies flag overrides.

    :param path: Path to a YAML file.
    :param overrides: ``section.field=value`` strings.
    :return: RunConfig
    """
    data = dict()
    if path:
        with open(path) as config_file:
            data = yaml.safe_load(config_file) or dict()
        logger.debug("Loaded config from %s", path)

    return config_from_dict(apply_overrides(data, overrides))


def fingerprint(config: RunConfig) -> str:
    """sha256 of the canonical JSON form of the config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def deterministic_backend() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")


def seed_everything(seed: int) -> torch.Generator:
    """
    Seeds python, numpy and torch and returns a torch Generator derived from the
    seed for data-order randomness. When ``AVCLUES_DETERMINISTIC`` is set torch is
    switched to deterministic algorithms.

    :param seed: Run seed
    :return: torch.Generator
    """
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)

    if deterministic_backend():
        torch.use_deterministic_algorithms(True)
        logger.info("Deterministic torch algorithms enabled")

    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def mode_names(modes: List[AblationMode]) -> Dict[str, AblationMode]:
    """Maps labels to modes and refuses duplicates."""
    named = dict()
    for mode in modes:
        if mode.label in named:
            raise ConfigError(f"Ablation mode {mode.label} requested twice")
        named[mode.label] = mode
    return named
