"""
Finite-difference check of the analytic gradients of the total loss.

A seeded micro instance (D=8, L=4, k=4, B=3, one block) runs in float64 with
dropout off, every frame sampled and batch norm in training mode. For a
covering sample of entries of every parameter tensor the analytic gradient is
compared with the central difference (f(x + h) - f(x - h)) / 2h, h = 1e-5, by
|a - n| / max(|a|, |n|, 1e-6).
"""
import logging
import time
from typing import Callable, Dict, List, Optional

import attr
import numpy as np
import torch

from avclues.config import ModelConfig, RunConfig, TrainConfig, seed_everything
from avclues.feature_store import FeatureBatch, VocabSizes
from avclues.model import build_model
from avclues.trainer import total_loss

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
DENOMINATOR_FLOOR = 1e-6
ENTRIES_PER_TENSOR = 6

MICRO_DIM = 8
MICRO_LENGTH = 4
MICRO_FRAMES = 4
MICRO_BATCH = 3
MICRO_VOCAB = VocabSizes(token=20, type=3, keyword=9, answer=5)


class GradcheckError(ValueError):
    def __init__(self, report: "GradcheckReport"):
        self.report = report
        super().__init__(
            f"Gradient check failed for {', '.join(report.failing)} "
            f"(max relative error {report.max_rel_err:.3e} > {report.tolerance:.0e})"
        )


@attr.s
class TensorCheck:
    name: str = attr.ib()
    entries: int = attr.ib()
    max_rel_err: float = attr.ib()


@attr.s
class GradcheckReport:
    max_rel_err: float = attr.ib()
    tolerance: float = attr.ib()
    tensors: List[TensorCheck] = attr.ib()
    seconds: float = attr.ib()

    @property
    def failing(self) -> List[str]:
        return [check.name for check in self.tensors if check.max_rel_err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failing": self.failing,
            "seconds": self.seconds,
            "tensors": [attr.asdict(check) for check in self.tensors],
        }


def micro_config(config: Optional[RunConfig] = None) -> RunConfig:
    """The micro instance sizes applied on top of ``config`` (mode, lambda_av, tau)."""
    config = config or RunConfig()
    model = ModelConfig(
        dim=MICRO_DIM,
        n_blocks=1,
        heads=1,
        frames=MICRO_FRAMES,
        dropout=0.0,
        frame_sampling="even",
        question_max_len=5,
        text_encoder=config.model.text_encoder,
    )
    train = attr.evolve(config.train, dtype="float64", batch_size=MICRO_BATCH, device="cpu")
    return RunConfig(model=model, train=train, mode=attr.evolve(config.mode, depth=None))


def micro_batch(seed: int = 0) -> FeatureBatch:
    generator = torch.Generator().manual_seed(seed)
    tokens = torch.randint(1, MICRO_VOCAB.token, (MICRO_BATCH, 5), generator=generator)
    tokens[-1, 3:] = 0
    keywords = torch.randint(1, MICRO_VOCAB.keyword, (MICRO_BATCH, 2), generator=generator)
    keywords[0, 1] = 0
    return FeatureBatch(
        sample_ids=[f"micro-{i}" for i in range(MICRO_BATCH)],
        visual=torch.randn(MICRO_BATCH, MICRO_LENGTH, MICRO_DIM, generator=generator, dtype=torch.float64),
        audio=torch.randn(MICRO_BATCH, MICRO_LENGTH, MICRO_DIM, generator=generator, dtype=torch.float64),
        question_tokens=tokens,
        type_ids=torch.arange(MICRO_BATCH) % MICRO_VOCAB.type,
        keyword_ids=keywords,
        answers=torch.tensor([0, 3, 1]),
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denominator


def _covering_entries(numel: int, rng: np.random.Generator, count: int) -> np.ndarray:
    if numel <= count:
        return np.arange(numel)
    inner = rng.choice(np.arange(1, numel - 1), size=count - 2, replace=False)
    return np.sort(np.concatenate([[0, numel - 1], inner]))


def gradcheck(
    config: Optional[RunConfig] = None,
    corrupt: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None,
    seed: int = 0,
    entries_per_tensor: int = ENTRIES_PER_TENSOR,
    raise_on_failure: bool = False,
) -> GradcheckReport:
    """
    Compares analytic and central-difference gradients of the total loss for
    every parameter tensor of the micro instance.

    :param config: Supplies the ablation mode, lambda_av and tau.
    :param corrupt: Optional hook ``(name, grad) -> grad`` applied to analytic
        gradients before comparison.
    :param seed: Seeds parameters, inputs and entry sampling.
    :param raise_on_failure: Raise GradcheckError instead of returning a failing
        report.
    """
    started = time.perf_counter()
    config = micro_config(config)
    seed_everything(seed)
    model = build_model(config, MICRO_VOCAB).to(dtype=torch.float64)
    model.train()
    batch = micro_batch(seed)

    def loss() -> torch.Tensor:
        result = model(batch)
        return total_loss(model, result, batch.answers, config.train, config.mode).total

    model.zero_grad()
    loss().backward()
    analytic: Dict[str, torch.Tensor] = dict()
    for name, param in model.named_parameters():
        grad = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
        analytic[name] = corrupt(name, grad) if corrupt else grad

    rng = np.random.Generator(np.random.Philox(key=seed))
    checks = list()
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            entries = _covering_entries(flat.numel(), rng, entries_per_tensor)
            numeric = np.empty(len(entries))
            for slot, entry in enumerate(entries):
                original = flat[entry].item()
                flat[entry] = original + STEP
                f_plus = loss().item()
                flat[entry] = original - STEP
                f_minus = loss().item()
                flat[entry] = original
                numeric[slot] = (f_plus - f_minus) / (2 * STEP)

            errors = relative_error(analytic[name].view(-1)[entries].numpy(), numeric)
            checks.append(TensorCheck(name=name, entries=len(entries), max_rel_err=float(errors.max())))
            logger.debug("%s max relative error %.3e", name, checks[-1].max_rel_err)

    report = GradcheckReport(
        max_rel_err=max(check.max_rel_err for check in checks),
        tolerance=TOLERANCE,
        tensors=checks,
        seconds=time.perf_counter() - started,
    )
    logger.info(
        "Checked %d tensors, max relative error %.3e in %.1fs",
        len(checks),
        report.max_rel_err,
        report.seconds,
    )
    if raise_on_failure and not report.passed:
        raise GradcheckError(report)
    return report
