from avclues.config import AblationMode, ModelConfig, RunConfig, TrainConfig, load_config
from avclues.feature_store import FeatureBundle, FeatureDataset, load_manifest
from avclues.model import MCDNet, build_model
from avclues.synthetic import SyntheticSpec, generate_synthetic_dataset
from avclues.trainer import evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AblationMode",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "load_config",
    "FeatureBundle",
    "FeatureDataset",
    "load_manifest",
    "MCDNet",
    "build_model",
    "SyntheticSpec",
    "generate_synthetic_dataset",
    "evaluate",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]
