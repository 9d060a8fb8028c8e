import logging
from typing import Optional

import attr
import torch
from torch import nn

from avclues.aggregator import AggregateOutput, MutualAggregator, QuestionEncoder
from avclues.attention import AssociationOutput, AssociationStack, dimension_compress
from avclues.config import AblationMode, ModelConfig, RunConfig
from avclues.feature_store import FeatureBatch, VocabSizes
from avclues.semantic import LatentProjector

logger = logging.getLogger(__name__)

LATE_FUSION_DROPOUT = 0.1


@attr.s
class ForwardResult:
    """
    Everything one forward pass produces. ``assoc`` and ``aggregate`` are None
    for the modality baseline.
    """

    logits: torch.Tensor = attr.ib()
    f_hat_q: Optional[torch.Tensor] = attr.ib(default=None)
    assoc: Optional[AssociationOutput] = attr.ib(default=None)
    aggregate: Optional[AggregateOutput] = attr.ib(default=None)


class AnswerHead(nn.Module):
    """
    Linear layer over f̂_q followed by softmax at prediction time.

    With ``fusion`` ``concat`` or ``add`` the compressed audio-visual embeddings
    are fused into the head input first (refinement 3D -> D or D -> D, then
    dropout); ``none`` feeds f̂_q alone.
    """

    def __init__(self, dim: int, n_answers: int, fusion: str = "none", dropout: float = LATE_FUSION_DROPOUT):
        super().__init__()
        self.dim = dim
        self.fusion = fusion
        self.late_refine = None
        self.late_dropout = None
        if fusion == "concat":
            self.late_refine = nn.Linear(3 * dim, dim)
        elif fusion == "add":
            self.late_refine = nn.Linear(dim, dim)
        if self.late_refine is not None:
            self.late_dropout = nn.Dropout(dropout)

        self.classifier = nn.Linear(dim, n_answers)
        nn.init.zeros_(self.classifier.bias)

    @property
    def in_features(self) -> int:
        return 3 * self.dim if self.fusion == "concat" else self.dim

    def forward(self, f_hat_q: torch.Tensor, global_v: Optional[torch.Tensor] = None, global_a: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.fusion == "none":
            return self.classifier(f_hat_q)

        if global_v is None or global_a is None:
            raise ValueError(f"Late fusion {self.fusion} needs the compressed audio-visual embeddings")
        if self.fusion == "concat":
            fused = torch.cat([f_hat_q, global_v, global_a], dim=-1)
        else:
            fused = f_hat_q + global_v + global_a
        return self.classifier(self.late_dropout(self.late_refine(fused)))


def predict(f_hat_q: torch.Tensor, head: AnswerHead, global_v=None, global_a=None):
    """
    :return: probabilities [B, A] and answer ids [B] (argmax, first index on ties)
    """
    probs = torch.softmax(head(f_hat_q, global_v, global_a), dim=-1)
    return probs, probs.argmax(dim=-1)


class MCDNet(nn.Module):
    """
    Question encoder, association stack, mutual aggregator, latent projector Θ
    and answer head, wired according to an AblationMode.
    """

    def __init__(self, config: ModelConfig, vocab_sizes: VocabSizes, mode: AblationMode = AblationMode()):
        super().__init__()
        self.config = config
        self.mode = mode
        dim = config.dim

        self.encoder = QuestionEncoder(
            vocab_sizes.token,
            vocab_sizes.type,
            vocab_sizes.keyword,
            dim,
            bidirectional=config.text_encoder == "bilstm",
        )
        self.stack = AssociationStack(
            dim, config.n_blocks, config.heads, config.ffn_width, mode.attention
        )
        self.aggregator = MutualAggregator(
            dim,
            heads=config.heads,
            frames=config.frames,
            dropout=config.dropout,
            reduce=config.clue_reduce,
            early_pass=config.early_pass,
            frame_sampling=config.frame_sampling,
            element_fusion=mode.element_fusion,
            lef_drop=mode.lef_drop,
        )
        self.projector = LatentProjector(dim, config.latent_width)
        self.head = AnswerHead(
            dim, vocab_sizes.answer, mode.fusion, dropout=config.dropout
        )

    def forward(self, batch: FeatureBatch) -> ForwardResult:
        question, text = self.encoder(batch.question_tokens, batch.type_ids, batch.keyword_ids)
        assoc = self.stack(batch.visual, batch.audio)
        aggregate = self.aggregator(assoc, batch.visual, batch.audio, question, text)

        if self.mode.fusion == "none":
            logits = self.head(aggregate.f_hat_q)
        else:
            logits = self.head(aggregate.f_hat_q, aggregate.global_v, aggregate.global_a)

        return ForwardResult(
            logits=logits, f_hat_q=aggregate.f_hat_q, assoc=assoc, aggregate=aggregate
        )


class ModalityBaseline(nn.Module):
    """
    Plain MLP over the concatenation of the chosen inputs: pooled question (q),
    compressed audio (a) and compressed visual (v). Trained with the answer loss
    only.
    """

    def __init__(self, config: ModelConfig, vocab_sizes: VocabSizes, inputs: str = "qav"):
        super().__init__()
        if not inputs or set(inputs) - set("qav"):
            raise ValueError(f"Baseline inputs must be a subset of 'qav', got {inputs!r}")
        self.inputs = inputs
        dim = config.dim
        self.encoder = None
        if "q" in inputs:
            self.encoder = QuestionEncoder(
                vocab_sizes.token,
                vocab_sizes.type,
                vocab_sizes.keyword,
                dim,
                bidirectional=config.text_encoder == "bilstm",
            )
        self.mlp = nn.Sequential(
            nn.Linear(len(inputs) * dim, dim),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(dim, vocab_sizes.answer),
        )

    def forward(self, batch: FeatureBatch) -> ForwardResult:
        parts = list()
        if "q" in self.inputs:
            parts.append(self.encoder.encode(batch.question_tokens).pooled)
        if "a" in self.inputs:
            parts.append(dimension_compress(batch.audio).squeeze(1))
        if "v" in self.inputs:
            parts.append(dimension_compress(batch.visual).squeeze(1))
        return ForwardResult(logits=self.mlp(torch.cat(parts, dim=-1)))


def build_model(config: RunConfig, vocab_sizes: VocabSizes) -> nn.Module:
    if config.mode.inputs != "mcd":
        return ModalityBaseline(config.model, vocab_sizes, config.mode.inputs)
    return MCDNet(config.model_for_mode, vocab_sizes, config.mode)
