"""
Objective, optimisation loop, checkpoints and evaluation.

The total objective is answer + distill_v + distill_a + lambda_av * av with no
hidden terms. Adam runs with a stepwise schedule lr * factor ** (epoch //
decay_every). A run directory receives ``trace.json``, ``best.ckpt``,
``last.ckpt`` and ``metrics.prom``.
"""
import io
import json
import logging
import math
import zipfile
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import attr
import numpy as np
import redis
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

from avclues.config import (
    AblationMode,
    RunConfig,
    TrainConfig,
    config_from_dict,
    fingerprint,
    seed_everything,
)
from avclues.feature_store import (
    DatasetManifest,
    FeatureBatch,
    FeatureDataset,
    VocabSizes,
    collate_bundles,
    load_manifest,
    read_tensor,
    write_tensor,
)
from avclues.model import ForwardResult, MCDNet, build_model
from avclues.semantic import ContrastConfig, contrast_terms
from avclues.telemetry.exposition import expose
from avclues.telemetry.metrics import Counter, Gauge, Histogram, timer
from avclues.telemetry.registry import TelemetryRegistry

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("answer", "distill_v", "distill_a", "av")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EPOCH_SECONDS_BUCKETS = (1.0, 5.0, 15.0, 60.0, 300.0, 900.0)

TRACE_FILE = "trace.json"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
METRICS_FILE = "metrics.prom"
CHECKPOINT_INDEX = "index.json"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, losses: Dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.losses = losses
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}: {losses}"
        )


@attr.s
class LossBreakdown:
    answer: torch.Tensor = attr.ib()
    distill_v: torch.Tensor = attr.ib()
    distill_a: torch.Tensor = attr.ib()
    av: torch.Tensor = attr.ib()
    total: torch.Tensor = attr.ib()

    def to_dict(self) -> Dict[str, float]:
        return {
            name: getattr(self, name).detach().item()
            for name in (*LOSS_COMPONENTS, "total")
        }


def combine_losses(answer, distill_v, distill_a, av, lambda_av: float) -> LossBreakdown:
    """total = answer + distill_v + distill_a + lambda_av * av"""
    return LossBreakdown(
        answer=answer,
        distill_v=distill_v,
        distill_a=distill_a,
        av=av,
        total=answer + distill_v + distill_a + lambda_av * av,
    )


def total_loss(model: nn.Module, result: ForwardResult, labels: torch.Tensor, cfg: TrainConfig, mode: AblationMode = AblationMode()) -> LossBreakdown:
    """
    Loss of one batch. Terms named in ``mode.loss_drop`` are zero; the modality
    baseline has no contrastive terms.

    :param model: The model that produced ``result``.
    :param result: Forward pass of the batch.
    :param labels: [B] answer ids.
    :param cfg: TrainConfig with lambda_av and tau.
    :param mode: Ablation mode of the run.
    :raises ValueError: on labels outside the answer vocabulary.
    """
    n_answers = result.logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_answers):
        raise ValueError(
            f"Answer labels must lie in [0, {n_answers}), "
            f"got range [{int(labels.min())}, {int(labels.max())}]"
        )

    answer = F.cross_entropy(result.logits, labels)
    zero = answer.new_zeros(())
    distill_v = distill_a = av = zero

    if isinstance(model, MCDNet) and result.aggregate is not None:
        aggregate = result.aggregate
        distill_v, distill_a, av = contrast_terms(
            aggregate.f_hat_q,
            aggregate.global_v,
            aggregate.global_a,
            result.assoc.visual_cross,
            result.assoc.audio_cross,
            model.projector,
            ContrastConfig(tau=cfg.tau, lambda_av=cfg.lambda_av),
        )
        if "distill_v" in mode.loss_drop:
            distill_v = zero
        if "distill_a" in mode.loss_drop:
            distill_a = zero
        if "av" in mode.loss_drop:
            av = zero

    return combine_losses(answer, distill_v, distill_a, av, cfg.lambda_av)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """lr * factor ** (epoch // decay_every)"""
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_decay_every)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> Tuple[torch.optim.Adam, LambdaLR]:
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )
    scheduler = LambdaLR(
        optimizer, lambda epoch: cfg.lr_factor ** (epoch // cfg.lr_decay_every)
    )
    return optimizer, scheduler


def _seed_worker(worker_id: int) -> None:
    np.random.seed(torch.initial_seed() % 2 ** 32)


def make_loader(dataset: FeatureDataset, config: RunConfig, shuffle: bool, generator: Optional[torch.Generator] = None) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=config.train.batch_size,
        shuffle=shuffle,
        collate_fn=partial(collate_bundles, question_max_len=config.model.question_max_len),
        num_workers=config.train.num_workers,
        worker_init_fn=_seed_worker,
        generator=generator,
    )


def train_step(model: nn.Module, optimizer: torch.optim.Optimizer, batch: FeatureBatch, config: RunConfig) -> LossBreakdown:
    """One optimizer step on a batch already on the run's device and dtype."""
    model.train()
    optimizer.zero_grad()
    result = model(batch)
    losses = total_loss(model, result, batch.answers, config.train, config.mode)
    if not torch.isfinite(losses.total):
        return losses

    losses.total.backward()
    if config.train.grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), config.train.grad_clip)
    optimizer.step()
    return losses


@attr.s
class EvalReport:
    """
    :param per_type: Accuracy per question type name; None for types without
        samples in the split.
    :param scenario_avg: Mean of the member type accuracies per scenario.
    :param overall: Correct over total.
    """

    per_type: Dict[str, Optional[float]] = attr.ib()
    scenario_avg: Dict[str, float] = attr.ib()
    overall: float = attr.ib()
    count: int = attr.ib()
    fingerprint: str = attr.ib()
    mode: str = attr.ib(default="default")
    split: str = attr.ib(default="test")

    def to_dict(self) -> dict:
        return attr.asdict(self)


def _batch_to(batch: FeatureBatch, config: RunConfig) -> FeatureBatch:
    return batch.to(config.train.device, config.train.torch_dtype)


@torch.no_grad()
def predictions(model: nn.Module, loader: DataLoader, config: RunConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Eval-mode pass over a loader.

    :return: predicted answer ids, true answer ids and type ids
    """
    model.eval()
    predicted, answers, types = list(), list(), list()
    for batch in loader:
        batch = _batch_to(batch, config)
        logits = model(batch).logits
        predicted.append(logits.argmax(dim=-1).cpu().numpy())
        answers.append(batch.answers.cpu().numpy())
        types.append(batch.type_ids.cpu().numpy())
    return np.concatenate(predicted), np.concatenate(answers), np.concatenate(types)


def accuracy_report(predicted: np.ndarray, answers: np.ndarray, types: np.ndarray, manifest: DatasetManifest, config_fingerprint: str = "", mode: str = "default", split: str = "test") -> EvalReport:
    if len(answers) == 0:
        raise ValueError(f"Cannot evaluate the empty split {split!r}")

    correct = predicted == answers
    per_type = dict()
    for type_id, name in enumerate(manifest.question_type_names):
        members = types == type_id
        per_type[name] = float(correct[members].mean()) if members.any() else None

    scenario_avg = dict()
    for scenario in sorted(set(manifest.question_type_scenarios.values())):
        member_accs = [
            per_type[name]
            for name, family in manifest.question_type_scenarios.items()
            if family == scenario and per_type.get(name) is not None
        ]
        if member_accs:
            scenario_avg[scenario] = float(np.mean(member_accs))

    return EvalReport(
        per_type=per_type,
        scenario_avg=scenario_avg,
        overall=float(correct.mean()),
        count=int(len(answers)),
        fingerprint=config_fingerprint,
        mode=mode,
        split=split,
    )


def evaluate_model(model: nn.Module, data_dir, split: str, config: RunConfig, manifest: Optional[DatasetManifest] = None) -> EvalReport:
    dataset = FeatureDataset(data_dir, split, manifest)
    if len(dataset) == 0:
        raise ValueError(f"Split {split!r} of {data_dir} is empty")
    predicted, answers, types = predictions(model, make_loader(dataset, config, shuffle=False), config)
    return accuracy_report(
        predicted,
        answers,
        types,
        dataset.manifest,
        config_fingerprint=fingerprint(config),
        mode=config.mode.label,
        split=split,
    )


def evaluate(data_dir, split: str, checkpoint) -> EvalReport:
    """
    Loads a checkpoint and evaluates it on a split of a feature directory.

    :raises ValueError: when the split is empty.
    """
    model, config, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, data_dir, split, config)


def save_checkpoint(path, model: nn.Module, config: RunConfig, vocab_sizes: VocabSizes, epoch: Optional[int] = None) -> Path:
    """
    Writes a zip archive with ``index.json`` (config, fingerprint, vocabulary
    sizes and the tensor index) and one MCDF tensor record per state entry.
    Floating point tensors are stored as float32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = list()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        for number, (name, value) in enumerate(model.state_dict().items()):
            array = value.detach().cpu().numpy()
            if np.issubdtype(array.dtype, np.floating):
                array = array.astype(np.float32)
            buffer = io.BytesIO()
            write_tensor(buffer, array)
            member = f"tensors/{number:05d}.mcdf"
            archive.writestr(member, buffer.getvalue())
            tensors.append(
                {"name": name, "file": member, "dtype": str(value.dtype), "shape": list(array.shape)}
            )

        index = {
            "config": config.to_dict(),
            "fingerprint": fingerprint(config),
            "vocab_sizes": attr.asdict(vocab_sizes),
            "epoch": epoch,
            "tensors": tensors,
        }
        archive.writestr(CHECKPOINT_INDEX, json.dumps(index, indent=2, sort_keys=True))

    return path


def load_checkpoint(path, device: Optional[str] = None) -> Tuple[nn.Module, RunConfig, VocabSizes]:
    """
    Rebuilds the model of a checkpoint written by :func:`save_checkpoint`.

    :param device: Overrides the device recorded in the checkpoint config.
    :return: model, run config and vocabulary sizes
    """
    with zipfile.ZipFile(path) as archive:
        index = json.loads(archive.read(CHECKPOINT_INDEX))
        config = config_from_dict(index["config"])
        if fingerprint(config) != index["fingerprint"]:
            logger.warning("Checkpoint %s fingerprint does not match its config", path)
        if device:
            config = attr.evolve(config, train=attr.evolve(config.train, device=device))

        vocab_sizes = VocabSizes(**index["vocab_sizes"])
        model = build_model(config, vocab_sizes)
        state = model.state_dict()
        for entry in index["tensors"]:
            array = read_tensor(io.BytesIO(archive.read(entry["file"])), f"{path}:{entry['file']}")
            target = state[entry["name"]]
            state[entry["name"]] = torch.from_numpy(array).to(dtype=target.dtype)

    model.load_state_dict(state)
    model.to(device=config.train.device, dtype=config.train.torch_dtype)
    return model, config, vocab_sizes


class RunTelemetry:
    """Training metrics of one run, kept in Redis or in process."""

    def __init__(self, cfg: TrainConfig, mode_label: str, redis_client=None):
        if redis_client is None and cfg.telemetry_redis_url:
            redis_client = redis.Redis.from_url(cfg.telemetry_redis_url)
        self.labels = {"mode": mode_label}
        self.registry = TelemetryRegistry(redis_client, cfg.telemetry_namespace)
        self.steps = self.registry.register(
            Counter("avclues_train_steps_total", "Optimizer steps taken", ["mode"])
        )
        self.loss = self.registry.register(
            Gauge("avclues_loss", "Mean loss of the last epoch", ["mode", "component"])
        )
        self.learning_rate = self.registry.register(
            Gauge("avclues_learning_rate", "Learning rate of the last epoch")
        )
        self.accuracy = self.registry.register(
            Gauge("avclues_accuracy", "Overall accuracy after the last epoch", ["mode", "split"])
        )
        self.epoch_seconds = self.registry.register(
            Histogram(
                "avclues_epoch_seconds",
                "Wall time of one training epoch",
                buckets=EPOCH_SECONDS_BUCKETS,
                allowed_labels=["mode"],
            )
        )

    def epoch_timer(self) -> timer:
        return timer(metric=self.epoch_seconds, labels=self.labels)

    def record_epoch(self, steps: int, record: dict) -> None:
        self.steps.inc(steps, labels=self.labels)
        for component in (*LOSS_COMPONENTS, "total"):
            self.loss.set(record[component], labels={**self.labels, "component": component})
        self.learning_rate.set(record["lr"])
        for split in ("val", "test"):
            if record.get(f"{split}_acc") is not None:
                self.accuracy.set(record[f"{split}_acc"], labels={**self.labels, "split": split})
        self.registry.transfer()

    def exposition(self) -> str:
        self.registry.transfer()
        return expose(self.registry.snapshot())


@attr.s
class FitResult:
    model: nn.Module = attr.ib()
    trace: dict = attr.ib()
    best_checkpoint: Path = attr.ib()
    last_checkpoint: Path = attr.ib()


def _mean_breakdowns(breakdowns: List[Dict[str, float]]) -> Dict[str, float]:
    return {
        name: float(np.mean([item[name] for item in breakdowns]))
        for name in (*LOSS_COMPONENTS, "total")
    }


def _split_accuracy(model, data_dir, split, config, manifest) -> Optional[float]:
    if not manifest.split(split):
        return None
    return evaluate_model(model, data_dir, split, config, manifest).overall


def fit(data_dir, config: RunConfig, run_dir, redis_client=None) -> FitResult:
    """
    Trains one model on the train split.

    Every step's total loss and every epoch's mean loss components, learning
    rate, validation and test accuracy go to ``trace.json``. The checkpoint with
    the best validation accuracy (first on ties, last epoch when there is no
    validation split) is kept next to the last one.

    :raises TrainingDivergedError: on a non-finite loss.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    generator = seed_everything(config.train.seed)

    train_set = FeatureDataset(data_dir, "train", manifest)
    if len(train_set) == 0:
        raise ValueError(f"Split 'train' of {data_dir} is empty")
    loader = make_loader(train_set, config, shuffle=True, generator=generator)

    model = build_model(config, manifest.vocab_sizes)
    model.to(device=config.train.device, dtype=config.train.torch_dtype)
    optimizer, scheduler = make_optimizer(model, config.train)
    telemetry = RunTelemetry(config.train, config.mode.label, redis_client)

    trace = {
        "mode": config.mode.label,
        "fingerprint": fingerprint(config),
        "steps": list(),
        "epochs": list(),
    }
    best_path, last_path = run_dir / BEST_CHECKPOINT, run_dir / LAST_CHECKPOINT
    best_val = -math.inf

    logger.info(
        "Training %s on %d samples for %d epochs", config.mode.label, len(train_set), config.train.epochs
    )
    for epoch in range(config.train.epochs):
        lr = optimizer.param_groups[0]["lr"]
        breakdowns = list()
        with telemetry.epoch_timer():
            for batch_index, batch in enumerate(loader):
                losses = train_step(model, optimizer, _batch_to(batch, config), config)
                values = losses.to_dict()
                if not math.isfinite(values["total"]):
                    raise TrainingDivergedError(epoch, batch_index, values)
                breakdowns.append(values)
                trace["steps"].append({"epoch": epoch, "batch": batch_index, "total": values["total"]})
                logger.debug("epoch %d batch %d %s", epoch, batch_index, values)
        scheduler.step()

        record = {"epoch": epoch, "lr": lr, **_mean_breakdowns(breakdowns)}
        record["val_acc"] = _split_accuracy(model, data_dir, "val", config, manifest)
        record["test_acc"] = _split_accuracy(model, data_dir, "test", config, manifest)
        trace["epochs"].append(record)
        telemetry.record_epoch(len(breakdowns), record)

        logger.info(
            "epoch %d lr %.1e loss %.4f (answer %.4f, distill_v %.4f, distill_a %.4f, av %.4f) val %s",
            epoch,
            lr,
            record["total"],
            record["answer"],
            record["distill_v"],
            record["distill_a"],
            record["av"],
            "n/a" if record["val_acc"] is None else f"{record['val_acc']:.4f}",
        )

        val_acc = record["val_acc"]
        if val_acc is not None and val_acc > best_val:
            best_val = val_acc
            save_checkpoint(best_path, model, config, manifest.vocab_sizes, epoch)

    save_checkpoint(last_path, model, config, manifest.vocab_sizes, config.train.epochs - 1)
    if best_val == -math.inf:
        save_checkpoint(best_path, model, config, manifest.vocab_sizes, config.train.epochs - 1)

    with open(run_dir / TRACE_FILE, "w", encoding="utf-8") as fp:
        json.dump(trace, fp, indent=2, sort_keys=True)
    (run_dir / METRICS_FILE).write_text(telemetry.exposition(), encoding="utf-8")

    return FitResult(model=model, trace=trace, best_checkpoint=best_path, last_checkpoint=last_path)
