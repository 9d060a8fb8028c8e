"""
Contrastive losses pulling the combinatorial question embedding towards the
compressed audio and visual embeddings of the same sample, and pulling the
audio and visual cross-features of a sample together.

Both losses are InfoNCE over in-batch negatives: for anchor i the positive is
sample i of the other side, the negatives are every other sample of that side.
Per-anchor losses are averaged over the batch. A batch of one has no negatives
and a loss of exactly zero.
"""
import logging
from typing import List, Sequence

import attr
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@attr.s(frozen=True)
class ContrastConfig:
    tau: float = attr.ib(default=0.1)
    lambda_av: float = attr.ib(default=0.1)

    @tau.validator
    def _check_tau(self, attribute, value):
        if value <= 0:
            raise ValueError(f"Temperature must be positive, got {value}")

    @lambda_av.validator
    def _check_lambda(self, attribute, value):
        if value < 0:
            raise ValueError(f"lambda_av must be nonnegative, got {value}")


@attr.s
class CrossSummary:
    m_v: torch.Tensor = attr.ib()
    m_a: torch.Tensor = attr.ib()


class LatentProjector(nn.Module):
    """Θ: D -> D_lat -> D_lat with ReLU in between, shared by all three roles."""

    def __init__(self, dim: int, latent_dim: int = None):
        super().__init__()
        latent_dim = latent_dim or dim
        self.layers = nn.Sequential(
            nn.Linear(dim, latent_dim), nn.ReLU(), nn.Linear(latent_dim, latent_dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def project(x: torch.Tensor, projector: LatentProjector) -> torch.Tensor:
    return projector(x)


def cosine_matrix(anchors: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    """
    Pairwise cosine similarities [B, B] with 1e-8 added to every denominator.
    """
    dots = anchors @ others.transpose(0, 1)
    norms = anchors.norm(dim=-1, keepdim=True) * others.norm(dim=-1).unsqueeze(0)
    return dots / (norms + COSINE_EPS)


def info_nce(similarity: torch.Tensor, tau: float) -> torch.Tensor:
    """
    -log(exp(s_ii / tau) / Σ_k exp(s_ik / tau)) averaged over anchors i.

    :param similarity: [B, B] with positives on the diagonal.
    :param tau: Temperature
    """
    targets = torch.arange(similarity.shape[0], device=similarity.device)
    return F.cross_entropy(similarity / tau, targets)


def distill_loss(q_batch: torch.Tensor, global_batch: torch.Tensor, projector: LatentProjector, cfg: ContrastConfig) -> torch.Tensor:
    """
    InfoNCE between Θ(f̂_q) anchors and Θ(F_j) of the same modality; negatives are
    the other samples' F_j.

    :param q_batch: [B, D] combinatorial question embeddings.
    :param global_batch: [B, D] compressed embeddings F_j.
    """
    if q_batch.shape[0] < 1:
        raise ValueError("distill_loss needs a nonempty batch")
    similarity = cosine_matrix(projector(q_batch), projector(global_batch))
    return info_nce(similarity, cfg.tau)


def cross_summary(visual_cross: Sequence[torch.Tensor], audio_cross: Sequence[torch.Tensor]) -> CrossSummary:
    """
    m_j = Σ over blocks of the temporal mean of f_j-cross.

    :param visual_cross: per block [B, L_v, D]
    :param audio_cross: per block [B, L_a, D]
    """
    return CrossSummary(m_v=_summed_means(visual_cross), m_a=_summed_means(audio_cross))


def _summed_means(blocks: Sequence[torch.Tensor]) -> torch.Tensor:
    if not blocks:
        raise ValueError("cross_summary needs the cross-features of at least one block")
    return torch.stack([block.mean(dim=1) for block in blocks]).sum(dim=0)


def av_contrast_loss(m_v: torch.Tensor, m_a: torch.Tensor, cfg: ContrastConfig) -> torch.Tensor:
    """
    InfoNCE between the L2-normalised cross summaries m̂_v (anchors) and m̂_a.
    Scale invariant in both arguments.
    """
    if m_v.shape[0] < 1:
        raise ValueError("av_contrast_loss needs a nonempty batch")
    return info_nce(cosine_matrix(m_v, m_a), cfg.tau)


def contrast_terms(
    f_hat_q: torch.Tensor,
    global_v: torch.Tensor,
    global_a: torch.Tensor,
    visual_cross: List[torch.Tensor],
    audio_cross: List[torch.Tensor],
    projector: LatentProjector,
    cfg: ContrastConfig,
):
    """
    The three contrastive terms of one batch. Without cross-features on both
    streams (attention ablations) the audio-visual term is zero.

    :return: distill_v, distill_a, av
    """
    distill_v = distill_loss(f_hat_q, global_v, projector, cfg)
    distill_a = distill_loss(f_hat_q, global_a, projector, cfg)

    if visual_cross and audio_cross:
        summary = cross_summary(visual_cross, audio_cross)
        av = av_contrast_loss(summary.m_v, summary.m_a, cfg)
    else:
        av = f_hat_q.new_zeros(())

    return distill_v, distill_a, av
