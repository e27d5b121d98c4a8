"""Contrastive knowledge distillation.

Question and knowledge token streams are each mapped into half of the model
width, cross-attended against each other, widened back to full width by
feature-axis concatenation and then joined along the token axis ("compound
tokens") for a self-attention stack. A second encoder of the same shape fuses
the result with caption tokens. Two top-down attention heads pool the fused
attribute nodes and the knowledge tokens, and a batch contrastive loss pulls
each sample's pooled attribute vector toward its pooled knowledge vector.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DomainError
from .primitives import (
    ACTIVATIONS,
    MLP,
    MLPSpec,
    MultiHeadCrossAttention,
    SelfAttentionStack,
    _activate,
    pairwise_cosine,
    softmax,
)

CONTRASTIVE_MODES = ("paper_literal", "cross_pair")
POOL_MODES = ("mean", "first")


class CompoundEncoder(nn.Module):
    """Channel-fusion encoder over a primary stream and a context stream.

    ``f_primary``/``f_context`` map each stream into ``d/2``; ``attend_primary``
    lets primary tokens query the context and ``attend_context`` the reverse.
    """

    def __init__(self, d_primary: int, d_context: int, d: int, heads: int,
                 layers: int, ffn_mult: int = 2):
        super().__init__()
        if d % 2:
            raise ConfigurationError(f"compound width {d} must be even")
        half = d // 2
        if half % heads:
            raise ConfigurationError(f"half width {half} is not divisible by {heads} heads")
        self.d = d
        self.f_primary = MLP(MLPSpec((d_primary, half), "identity"))
        self.f_context = MLP(MLPSpec((d_context, half), "identity"))
        self.attend_primary = MultiHeadCrossAttention(half, heads)
        self.attend_context = MultiHeadCrossAttention(half, heads)
        self.g_att = SelfAttentionStack(d, layers, heads, ffn_mult)

    def channel_split(self, primary: torch.Tensor, context: torch.Tensor):
        return self.f_primary(primary), self.f_context(context)

    def compound_fuse(self, primary_h: torch.Tensor, context_h: torch.Tensor,
                      return_weights: bool = False):
        a_p, w_p = self.attend_primary(primary_h, context_h, context_h, return_weights=True)
        a_c, w_c = self.attend_context(context_h, primary_h, primary_h, return_weights=True)
        primary_hat = torch.cat([primary_h, a_p], dim=-1)
        context_hat = torch.cat([context_h, a_c], dim=-1)
        tokens = torch.cat([primary_hat, context_hat], dim=-2)
        z, w_self = self.g_att(tokens, return_weights=True)
        if return_weights:
            return z, {"cross_primary": w_p, "cross_context": w_c, "self": w_self}
        return z

    def forward(self, primary, context, return_weights: bool = False):
        p_h, c_h = self.channel_split(primary, context)
        return self.compound_fuse(p_h, c_h, return_weights=return_weights)


class TopDownAttention(nn.Module):
    """Question-conditioned soft pooling: ``a_k = w . act(W [x_k; z])``, relu by default."""

    def __init__(self, d_x: int, d_z: int, d_hidden: int, activation: str = "relu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.d_x, self.d_z = d_x, d_z
        self.activation = activation
        self.W = nn.Linear(d_x + d_z, d_hidden, bias=False)
        self.w = nn.Linear(d_hidden, 1, bias=False)

    def forward(self, x: torch.Tensor, z: torch.Tensor):
        if x.shape[-2] < 1:
            raise DomainError("top-down attention needs at least one row")
        if x.shape[-1] != self.d_x or z.shape[-1] != self.d_z:
            raise ConfigurationError(
                f"top-down attention expects widths ({self.d_x}, {self.d_z}), "
                f"got ({x.shape[-1]}, {z.shape[-1]})")
        zz = z.unsqueeze(-2).expand(*x.shape[:-1], z.shape[-1])
        scores = self.w(_activate(self.W(torch.cat([x, zz], dim=-1)), self.activation)).squeeze(-1)
        weights = softmax(scores, dim=-1)
        pooled = (weights.unsqueeze(-2) @ x).squeeze(-2)
        return pooled, weights


def top_down_attend(x, z, attn: TopDownAttention):
    return attn(x, z)


def pool_query(z_tokens: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    if z_tokens.shape[-2] < 1:
        raise DomainError("cannot pool an empty token set")
    if mode == "mean":
        return z_tokens.mean(dim=-2)
    if mode == "first":
        return z_tokens[..., 0, :]
    raise ConfigurationError(f"unknown pooling mode {mode!r}")


def contrastive_terms(s_bar: torch.Tensor, f_bar: torch.Tensor, mode: str = "paper_literal",
                      temperature: float = 1.0, diagnostics: Counter | None = None):
    """Per-anchor loss terms for a batch of ``(s_bar_i, f_bar_i)`` pairs.

    paper_literal: negatives for anchor i are the other samples' own pairs
    ``cos(s_b, f_b)``. cross_pair: negatives are ``cos(s_i, f_b)`` (in-batch).
    """
    if mode not in CONTRASTIVE_MODES:
        raise ConfigurationError(f"unknown contrastive mode {mode!r}")
    if s_bar.ndim != 2 or s_bar.shape != f_bar.shape:
        raise ConfigurationError("contrastive loss needs two [batch, d] matrices of equal shape")
    n = s_bar.shape[0]
    if n < 2:
        raise DomainError("contrastive loss needs a batch of at least 2 (no negatives)")
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    cos = pairwise_cosine(s_bar, f_bar, diagnostics) / temperature  # [i, b]
    if mode == "cross_pair":
        return -torch.diagonal(torch.log_softmax(cos, dim=1))
    diag = torch.diagonal(cos)
    return -(diag - torch.logsumexp(diag, dim=0))


def contrastive_loss(s_bar, f_bar, mode: str = "paper_literal", temperature: float = 1.0,
                     diagnostics: Counter | None = None) -> torch.Tensor:
    return contrastive_terms(s_bar, f_bar, mode, temperature, diagnostics).mean()


@dataclass
class DistillationState:
    Z: torch.Tensor
    F: torch.Tensor
    query: torch.Tensor
    S_bar: torch.Tensor
    F_bar: torch.Tensor
    attribute_weights: torch.Tensor
    knowledge_weights: torch.Tensor


class KnowledgeDistillation(nn.Module):
    """Question/knowledge encoder, caption fusion and the two top-down poolers."""

    def __init__(self, d_t: int, d_s: int, d: int = 512, heads: int = 8, layers: int = 5,
                 d_att: int = 512, pool: str = "mean", ffn_mult: int = 2,
                 attention_activation: str = "relu"):
        super().__init__()
        if pool not in POOL_MODES:
            raise ConfigurationError(f"unknown pooling mode {pool!r}")
        self.pool = pool
        self.d = d
        # primary = question (mapped by f_2), context = knowledge (mapped by f_1)
        self.question_knowledge = CompoundEncoder(d_t, d_t, d, heads, layers, ffn_mult)
        self.knowledge_caption = CompoundEncoder(d, d_t, d, heads, layers, ffn_mult)
        self.attend_attributes = TopDownAttention(d_s, d, d_att, attention_activation)
        self.attend_knowledge = TopDownAttention(d, d, d_att, attention_activation)

    def encode(self, question, knowledge, caption):
        z = self.question_knowledge(question, knowledge)
        f = self.knowledge_caption(z, caption)
        return z, f

    def forward(self, attributes, question, knowledge, caption) -> DistillationState:
        z, f = self.encode(question, knowledge, caption)
        q = pool_query(z, self.pool)
        s_bar, w_s = self.attend_attributes(attributes, q)
        f_bar, w_f = self.attend_knowledge(f, q)
        return DistillationState(z, f, q, s_bar, f_bar, w_s, w_f)

