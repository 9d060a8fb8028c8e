"""
Soft bidirectional inter-attention between the visual and audio streams.

Each association block runs self-attention per stream and adds a cross branch in
which the temporally compressed other stream queries this stream. The attended
1 x D vector gates this stream channel by channel, W^cross = diag(a), so
f_cross = f_self x W^cross keeps the L x D shape. Block outputs follow

    f̂_j = f_j + BN(f_j2o) + BN(FFN(f_j + BN(f_j2o)))

with one BN pair per stream.
"""
import logging
import math
from typing import List, Optional, Tuple

import attr
import torch
from torch import nn

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Active branches per attention mode: (self_v, self_a, cross_v, cross_a).
# cross_v is the visual stream queried by compressed audio ("A-query"),
# cross_a the audio stream queried by compressed visual ("V-query").
ATTENTION_BRANCHES = {
    "off": (False, False, False, False),
    "self_a": (False, True, False, False),
    "self_v": (True, False, False, False),
    "self_av": (True, True, False, False),
    "cross_aq": (False, False, True, False),
    "cross_vq": (False, False, False, True),
    "cross_both": (False, False, True, True),
    "bidir_aq": (True, True, True, False),
    "bidir_vq": (True, True, False, True),
    "bidir_full": (True, True, True, True),
}


class ScaledDotAttention(nn.Module):
    """
    softmax(Q K^T / sqrt(d)) V with Q = W_Q q, K = W_K k, V = W_V v.

    With ``heads > 1`` the projections are split into equal heads, each scaled by
    its own width, and the returned weights are averaged over heads.

    :param dim: Feature width D.
    :param heads: Number of heads.
    :param scale: Override for d. Defaults to the (per head) query width.
    """

    def __init__(self, dim: int, heads: int = 1, scale: Optional[float] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.scale = scale or dim // heads
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, length, _ = x.shape
        x = x.reshape(*lead, length, self.heads, self.dim // self.heads)
        return x.transpose(-2, -3)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        :param q: [..., m, D]
        :param k: [..., n, D]
        :param v: [..., n, D]
        :return: output [..., m, D] and weights [..., m, n]
        """
        if k.shape[-2] == 0:
            raise ValueError("Attention needs at least one key, got a zero-length sequence")
        if k.shape[-2] != v.shape[-2]:
            raise ValueError(f"Key length {k.shape[-2]} differs from value length {v.shape[-2]}")

        queries = self._split(self.query(q))
        keys = self._split(self.key(k))
        values = self._split(self.value(v))

        scores = queries @ keys.transpose(-1, -2) / math.sqrt(self.scale)
        # torch.softmax subtracts the row max before exponentiating.
        weights = torch.softmax(scores, dim=-1)
        output = (weights @ values).transpose(-2, -3)
        output = output.reshape(*output.shape[:-2], self.dim)

        return output, weights.mean(dim=-3)


def scaled_dot_attention(q, k, v, params: ScaledDotAttention):
    return params(q, k, v)


def dimension_compress(seq: torch.Tensor) -> torch.Tensor:
    """Temporal mean [..., L, D] -> [..., 1, D]."""
    if seq.shape[-2] < 1:
        raise ValueError("Cannot compress an empty sequence")
    return seq.mean(dim=-2, keepdim=True)


def cross_gate(
    other_global: torch.Tensor,
    f_self: torch.Tensor,
    params: ScaledDotAttention,
    return_matrix: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Queries ``f_self`` with the compressed other stream and gates ``f_self`` by
    the attended vector.

    :param other_global: [..., 1, D] compressed other stream F_other.
    :param f_self: [..., L, D]
    :param params: Cross attention.
    :param return_matrix: Return W^cross = diag(a) as [..., D, D] instead of the
        gate vector a [..., 1, D].
    :return: f_cross [..., L, D] and the gate.
    """
    attended, _ = params(other_global, f_self, f_self)
    f_cross = f_self * attended
    if return_matrix:
        return f_cross, torch.diag_embed(attended.squeeze(-2))
    return f_cross, attended


def batch_norm_sequence(bn: nn.BatchNorm1d, seq: torch.Tensor) -> torch.Tensor:
    """Per channel BN over batch and time of a [B, L, D] sequence."""
    return bn(seq.transpose(1, 2)).transpose(1, 2)


@attr.s
class AssociationOutput:
    """
    :param v_hat: [B, L_v, D] advanced visual embeddings.
    :param a_hat: [B, L_a, D] advanced audio embeddings.
    :param visual_cross: f_v-cross of every block whose visual cross branch ran.
    :param audio_cross: f_a-cross of every block whose audio cross branch ran.
    """

    v_hat: torch.Tensor = attr.ib()
    a_hat: torch.Tensor = attr.ib()
    visual_cross: List[torch.Tensor] = attr.ib(factory=list)
    audio_cross: List[torch.Tensor] = attr.ib(factory=list)


@attr.s
class InterAttentionOutput:
    f_v2a: Optional[torch.Tensor] = attr.ib()
    f_a2v: Optional[torch.Tensor] = attr.ib()
    visual_cross: Optional[torch.Tensor] = attr.ib(default=None)
    audio_cross: Optional[torch.Tensor] = attr.ib(default=None)


class _StreamResidual(nn.Module):
    def __init__(self, dim: int, ffn_hidden: int):
        super().__init__()
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_hidden), nn.ReLU(), nn.Linear(ffn_hidden, dim)
        )
        self.bn_mix = nn.BatchNorm1d(dim, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.bn_ffn = nn.BatchNorm1d(dim, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, f: torch.Tensor, mixed: torch.Tensor) -> torch.Tensor:
        normed = batch_norm_sequence(self.bn_mix, mixed)
        return f + normed + batch_norm_sequence(self.bn_ffn, self.ffn(f + normed))


class AssociationBlock(nn.Module):
    """
    One association block. Streams with no active branch in the configured
    attention mode pass through unchanged.
    """

    def __init__(self, dim: int, heads: int = 1, ffn_hidden: Optional[int] = None, attention: str = "bidir_full"):
        super().__init__()
        if attention not in ATTENTION_BRANCHES:
            raise ValueError(f"Unknown attention mode {attention!r}")
        self.attention = attention
        self.use_self_v, self.use_self_a, self.use_cross_v, self.use_cross_a = ATTENTION_BRANCHES[attention]

        self.self_v = ScaledDotAttention(dim, heads)
        self.self_a = ScaledDotAttention(dim, heads)
        self.cross_v = ScaledDotAttention(dim, heads)
        self.cross_a = ScaledDotAttention(dim, heads)
        self.residual_v = _StreamResidual(dim, ffn_hidden or 2 * dim)
        self.residual_a = _StreamResidual(dim, ffn_hidden or 2 * dim)

    @property
    def visual_active(self) -> bool:
        return self.use_self_v or self.use_cross_v

    @property
    def audio_active(self) -> bool:
        return self.use_self_a or self.use_cross_a

    def inter_attention(self, f_v: torch.Tensor, f_a: torch.Tensor) -> InterAttentionOutput:
        """
        f_a2v = self(f_a) + f_a x diag(cross(F_v, f_a, f_a)), f_v2a symmetric.
        Inactive directions are returned as None.
        """
        global_v = dimension_compress(f_v)
        global_a = dimension_compress(f_a)
        result = InterAttentionOutput(f_v2a=None, f_a2v=None)

        if self.visual_active:
            f_v2a = torch.zeros_like(f_v)
            if self.use_self_v:
                f_v2a = f_v2a + self.self_v(f_v, f_v, f_v)[0]
            if self.use_cross_v:
                result.visual_cross, _ = cross_gate(global_a, f_v, self.cross_v)
                f_v2a = f_v2a + result.visual_cross
            result.f_v2a = f_v2a

        if self.audio_active:
            f_a2v = torch.zeros_like(f_a)
            if self.use_self_a:
                f_a2v = f_a2v + self.self_a(f_a, f_a, f_a)[0]
            if self.use_cross_a:
                result.audio_cross, _ = cross_gate(global_v, f_a, self.cross_a)
                f_a2v = f_a2v + result.audio_cross
            result.f_a2v = f_a2v

        return result

    def forward(self, f_v: torch.Tensor, f_a: torch.Tensor) -> AssociationOutput:
        mixed = self.inter_attention(f_v, f_a)
        v_hat = self.residual_v(f_v, mixed.f_v2a) if mixed.f_v2a is not None else f_v
        a_hat = self.residual_a(f_a, mixed.f_a2v) if mixed.f_a2v is not None else f_a

        return AssociationOutput(
            v_hat=v_hat,
            a_hat=a_hat,
            visual_cross=[mixed.visual_cross] if mixed.visual_cross is not None else [],
            audio_cross=[mixed.audio_cross] if mixed.audio_cross is not None else [],
        )


class AssociationStack(nn.Module):
    """
    N association blocks applied in sequence. With attention mode ``off`` the
    stack is bypassed and the inputs flow through untouched.
    """

    def __init__(self, dim: int, n_blocks: int = 2, heads: int = 1, ffn_hidden: Optional[int] = None, attention: str = "bidir_full"):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"An association stack needs at least one block, got {n_blocks}")
        self.attention = attention
        self.blocks = nn.ModuleList(
            AssociationBlock(dim, heads, ffn_hidden, attention) for _ in range(n_blocks)
        )

    def forward(self, f_v: torch.Tensor, f_a: torch.Tensor) -> AssociationOutput:
        if self.attention == "off":
            return AssociationOutput(v_hat=f_v, a_hat=f_a)

        output = AssociationOutput(v_hat=f_v, a_hat=f_a)
        for block in self.blocks:
            step = block(output.v_hat, output.a_hat)
            output = AssociationOutput(
                v_hat=step.v_hat,
                a_hat=step.a_hat,
                visual_cross=output.visual_cross + step.visual_cross,
                audio_cross=output.audio_cross + step.audio_cross,
            )
        return output


def run_association_stack(f_v: torch.Tensor, f_a: torch.Tensor, stack: AssociationStack) -> AssociationOutput:
    return stack(f_v, f_a)
