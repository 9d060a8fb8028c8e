"""
Writes audio-visual clues into the question embedding.

Per modality j the shared aggregator enriches the question with the compressed
stream, describes every sampled frame in the light of the enriched question,
keeps the Top-k/2 descriptions and attaches each kept description h to the
question as f_q ⊕ (h ⊙ f_q). The aggregator runs on the low-level embeddings and
on the association-stack output with the same weights and the two results are
averaged. A text object (sentence, type and keyword embeddings) fused with the
compressed streams and the two clue embeddings are combined through learnable
D x D matrices into the combinatorial question embedding f̂_q.

Where the formulas attend over a single vector (the pooled question, one frame)
the key sequence has length one, so the softmax is identically 1 and the
attention reduces to its value projection.
"""
import logging
from typing import FrozenSet, Optional, Tuple

import attr
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from avclues.attention import AssociationOutput, ScaledDotAttention, dimension_compress
from avclues.feature_store import PAD_ID

logger = logging.getLogger(__name__)

COMBINATION_INIT_STD = 0.02


@attr.s
class QuestionEncoding:
    token_states: torch.Tensor = attr.ib()
    pooled: torch.Tensor = attr.ib()


@attr.s
class TextObject:
    sentence_emb: torch.Tensor = attr.ib()
    type_emb: torch.Tensor = attr.ib()
    keyword_emb: torch.Tensor = attr.ib()
    fused: torch.Tensor = attr.ib()


@attr.s
class ClueSet:
    """
    :param descriptions: [B, k, D] scene descriptions h_j (nonnegative).
    :param scores: [B, k] channel means of the descriptions.
    :param indices: [B, max(k // 2, 1)] selected positions in temporal order.
    :param selected: [B, max(k // 2, 1), D] the clues h̄_j.
    """

    descriptions: torch.Tensor = attr.ib()
    scores: torch.Tensor = attr.ib()
    indices: torch.Tensor = attr.ib()
    selected: torch.Tensor = attr.ib()


@attr.s
class ModalityClues:
    """Clue embedding of one modality plus what produced it."""

    embedding: torch.Tensor = attr.ib()
    frame_index: torch.Tensor = attr.ib()
    late: ClueSet = attr.ib()
    early: Optional[ClueSet] = attr.ib(default=None)


@attr.s
class AggregateOutput:
    f_hat_q: torch.Tensor = attr.ib()
    global_v: torch.Tensor = attr.ib()
    global_a: torch.Tensor = attr.ib()
    visual: ModalityClues = attr.ib()
    audio: ModalityClues = attr.ib()
    text: TextObject = attr.ib()


class QuestionEncoder(nn.Module):
    """
    LSTM question encoder (hidden size D) plus the text-object refinement
    3D -> D over sentence, type and keyword embeddings.
    """

    def __init__(self, token_vocab: int, type_vocab: int, keyword_vocab: int, dim: int, bidirectional: bool = False):
        super().__init__()
        self.dim = dim
        self.bidirectional = bidirectional
        self.word_embedding = nn.Embedding(token_vocab, dim, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(dim, dim, batch_first=True, bidirectional=bidirectional)
        self.direction_merge = nn.Linear(2 * dim, dim) if bidirectional else None
        self.type_embedding = nn.Embedding(type_vocab, dim)
        self.keyword_embedding = nn.Embedding(keyword_vocab, dim, padding_idx=PAD_ID)
        self.refine = nn.Linear(3 * dim, dim)

    def encode(self, tokens: torch.Tensor) -> QuestionEncoding:
        lengths = (tokens != PAD_ID).sum(dim=1).clamp(min=1)
        embedded = torch.tanh(self.word_embedding(tokens))
        packed = pack_padded_sequence(
            embedded, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        states, (hidden, _) = self.lstm(packed)
        states, _ = pad_packed_sequence(states, batch_first=True, total_length=tokens.shape[1])

        if self.bidirectional:
            pooled = self.direction_merge(torch.cat([hidden[-2], hidden[-1]], dim=-1))
            states = self.direction_merge(states)
        else:
            pooled = hidden[-1]

        return QuestionEncoding(token_states=states, pooled=pooled)

    def text_object(self, pooled: torch.Tensor, type_ids: torch.Tensor, keyword_ids: torch.Tensor) -> TextObject:
        type_emb = self.type_embedding(type_ids)
        mask = (keyword_ids != PAD_ID).unsqueeze(-1).to(pooled.dtype)
        keyword_emb = (self.keyword_embedding(keyword_ids) * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        fused = self.refine(torch.cat([pooled, type_emb, keyword_emb], dim=-1))
        return TextObject(sentence_emb=pooled, type_emb=type_emb, keyword_emb=keyword_emb, fused=fused)

    def forward(self, tokens, type_ids, keyword_ids) -> Tuple[QuestionEncoding, TextObject]:
        encoding = self.encode(tokens)
        return encoding, self.text_object(encoding.pooled, type_ids, keyword_ids)


def encode_question(encoder: QuestionEncoder, tokens, type_ids, keyword_ids):
    return encoder(tokens, type_ids, keyword_ids)


def sample_frames(batch: int, length: int, k: int, training: bool, sampling: str = "random", device=None) -> torch.Tensor:
    """
    Picks min(k, length) frame positions per sample, in temporal order. Training
    with random sampling draws without replacement; otherwise positions are
    evenly spaced.

    :return: [batch, min(k, length)] long tensor
    """
    k = min(k, length)
    if k == length:
        return torch.arange(length, device=device).expand(batch, length)

    if training and sampling == "random":
        draws = torch.rand(batch, length, device=device).argsort(dim=1)[:, :k]
        return draws.sort(dim=1).values

    positions = torch.linspace(0, length - 1, k, device=device).round().long()
    return positions.expand(batch, k)


def gather_frames(seq: torch.Tensor, frame_index: torch.Tensor) -> torch.Tensor:
    index = frame_index.unsqueeze(-1).expand(-1, -1, seq.shape[-1])
    return seq.gather(1, index)


def topk_select(descriptions: torch.Tensor) -> ClueSet:
    """
    Scores every description by its channel mean and keeps the max(k // 2, 1)
    best, ties going to the lower index. The kept clues stay in temporal order.

    :param descriptions: [B, k, D]
    :return: ClueSet
    """
    scores = descriptions.mean(dim=-1)
    keep = max(descriptions.shape[1] // 2, 1)
    ranked = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    indices = ranked[:, :keep].sort(dim=-1).values
    return ClueSet(
        descriptions=descriptions,
        scores=scores,
        indices=indices,
        selected=gather_frames(descriptions, indices),
    )


def attach_clues(clues: torch.Tensor, f_q: torch.Tensor, reduce: str = "sum") -> torch.Tensor:
    """
    Σ_h f_q ⊕ (h ⊙ f_q) over the clues, or the mean when ``reduce`` is ``mean``.

    :param clues: [B, m, D]
    :param f_q: [B, D]
    """
    if clues.shape[1] == 0:
        raise ValueError("Cannot attach an empty clue set")
    question = f_q.unsqueeze(1)
    attached = question + clues * question
    if reduce == "mean":
        return attached.mean(dim=1)
    return attached.sum(dim=1)


def local_element_fusion(
    text: torch.Tensor,
    global_v: torch.Tensor,
    global_a: torch.Tensor,
    element_fusion: str = "add_dot",
    drop: FrozenSet[str] = frozenset(),
) -> torch.Tensor:
    """
    f̃_t ⊙ (f̃_t ⊕ F_v ⊕ F_a) before dropout and refinement.

    ``drop`` removes F_v, F_a or the text object; without the text object the
    result is F_v ⊕ F_a. ``add_only`` replaces the product by f̃_t ⊕ F_v ⊕ F_a.
    """
    if "F_v" in drop:
        global_v = torch.zeros_like(global_v)
    if "F_a" in drop:
        global_a = torch.zeros_like(global_a)
    if "text_object" in drop:
        return global_v + global_a

    summed = text + global_v + global_a
    if element_fusion == "add_only":
        return summed
    return text * summed


class ClueAggregator(nn.Module):
    """
    Aggregator of one modality. ``text_query`` is the stream-queries-question
    attention, ``scene_query`` the question-queries-frame attention.
    """

    def __init__(self, dim: int, heads: int = 1, reduce: str = "sum"):
        super().__init__()
        self.reduce = reduce
        self.text_query = ScaledDotAttention(dim, heads)
        self.scene_query = ScaledDotAttention(dim, heads)

    def enrich_question(self, global_j: torch.Tensor, f_q: torch.Tensor) -> torch.Tensor:
        """
        f̄_q = f_q ⊕ ζ_{j-q}(F_j, f_q, f_q)

        :param global_j: [B, 1, D]
        :param f_q: [B, D]
        """
        question = f_q.unsqueeze(1)
        attended, _ = self.text_query(global_j, question, question)
        return f_q + attended.squeeze(1)

    def scene_descriptions(self, enriched: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """
        h_i = ReLU(ζ_{q-j}(f̄_q, f_i, f_i)) for every frame.

        :param enriched: [B, D]
        :param frames: [B, k, D]
        :return: [B, k, D]
        """
        batch, k, dim = frames.shape
        query = enriched.unsqueeze(1).expand(batch, k, dim).reshape(batch * k, 1, dim)
        per_frame = frames.reshape(batch * k, 1, dim)
        attended, _ = self.scene_query(query, per_frame, per_frame)
        return torch.relu(attended.reshape(batch, k, dim))

    def forward(self, seq: torch.Tensor, frame_index: torch.Tensor, f_q: torch.Tensor) -> Tuple[torch.Tensor, ClueSet]:
        enriched = self.enrich_question(dimension_compress(seq), f_q)
        descriptions = self.scene_descriptions(enriched, gather_frames(seq, frame_index))
        clues = topk_select(descriptions)
        return attach_clues(clues.selected, f_q, self.reduce), clues


class CombinationLayer(nn.Module):
    """
    Learnable M_g, M_vq, M_aq (identity plus N(0, 0.02) noise at init), then the
    3D -> D multi-feature refinement.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.m_g = nn.Parameter(self._near_identity(dim))
        self.m_vq = nn.Parameter(self._near_identity(dim))
        self.m_aq = nn.Parameter(self._near_identity(dim))
        self.refine = nn.Linear(3 * dim, dim)

    @staticmethod
    def _near_identity(dim: int) -> torch.Tensor:
        return torch.eye(dim) + COMBINATION_INIT_STD * torch.randn(dim, dim)

    def forward(self, f_g: torch.Tensor, f_vq: torch.Tensor, f_aq: torch.Tensor) -> torch.Tensor:
        stacked = torch.cat([f_g @ self.m_g, f_vq @ self.m_vq, f_aq @ self.m_aq], dim=-1)
        return self.refine(stacked)


def combine(f_g, f_vq, f_aq, params: CombinationLayer) -> torch.Tensor:
    return params(f_g, f_vq, f_aq)


class MutualAggregator(nn.Module):
    """
    Runs the per-modality aggregators on both levels, the local element fusion and
    the combination.

    :param dim: Feature width D.
    :param heads: Attention heads.
    :param frames: k frames sampled per modality.
    :param dropout: Dropout before the LEF refinement.
    :param reduce: ``sum`` or ``mean`` over attached clues.
    :param early_pass: Also aggregate the low-level embeddings.
    :param frame_sampling: ``random`` or ``even`` sampling while training.
    :param element_fusion: ``add_dot`` or ``add_only``.
    :param lef_drop: Terms removed from the local element fusion.
    """

    def __init__(
        self,
        dim: int,
        heads: int = 1,
        frames: int = 12,
        dropout: float = 0.1,
        reduce: str = "sum",
        early_pass: bool = True,
        frame_sampling: str = "random",
        element_fusion: str = "add_dot",
        lef_drop: FrozenSet[str] = frozenset(),
    ):
        super().__init__()
        self.frames = frames
        self.early_pass = early_pass
        self.frame_sampling = frame_sampling
        self.element_fusion = element_fusion
        self.lef_drop = frozenset(lef_drop)

        self.visual = ClueAggregator(dim, heads, reduce)
        self.audio = ClueAggregator(dim, heads, reduce)
        self.lef_dropout = nn.Dropout(dropout)
        self.lef_refine = nn.Linear(dim, dim)
        self.combination = CombinationLayer(dim)

    def _modality(self, aggregator: ClueAggregator, low: torch.Tensor, high: torch.Tensor, f_q: torch.Tensor) -> ModalityClues:
        frame_index = sample_frames(
            high.shape[0],
            high.shape[1],
            self.frames,
            self.training,
            self.frame_sampling,
            device=high.device,
        )
        late_embedding, late = aggregator(high, frame_index, f_q)
        if not self.early_pass:
            return ModalityClues(embedding=late_embedding, frame_index=frame_index, late=late)

        early_embedding, early = aggregator(low, frame_index, f_q)
        return ModalityClues(
            embedding=(early_embedding + late_embedding) / 2,
            frame_index=frame_index,
            late=late,
            early=early,
        )

    def forward(
        self,
        assoc: AssociationOutput,
        low_v: torch.Tensor,
        low_a: torch.Tensor,
        question: QuestionEncoding,
        text: TextObject,
    ) -> AggregateOutput:
        f_q = question.pooled
        visual = self._modality(self.visual, low_v, assoc.v_hat, f_q)
        audio = self._modality(self.audio, low_a, assoc.a_hat, f_q)

        global_v = dimension_compress(assoc.v_hat).squeeze(1)
        global_a = dimension_compress(assoc.a_hat).squeeze(1)
        fused = local_element_fusion(
            text.fused, global_v, global_a, self.element_fusion, self.lef_drop
        )
        f_g = self.lef_refine(self.lef_dropout(fused))

        return AggregateOutput(
            f_hat_q=self.combination(f_g, visual.embedding, audio.embedding),
            global_v=global_v,
            global_a=global_a,
            visual=visual,
            audio=audio,
            text=text,
        )


def aggregate(assoc, low_v, low_a, question, text, params: MutualAggregator) -> AggregateOutput:
    return params(assoc, low_v, low_a, question, text)
