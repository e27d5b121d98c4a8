"""Answer prediction and the two-part training objective."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, DomainError
from .primitives import MLP, MLPSpec


class AnswerHead(nn.Module):
    """``f_ans`` over the concatenated pooled attribute and knowledge vectors."""

    def __init__(self, d_in: int, n_answers: int, d_hidden: int | None = None,
                 activation: str = "relu"):
        super().__init__()
        widths = (d_in, n_answers) if not d_hidden else (d_in, d_hidden, n_answers)
        self.f_ans = MLP(MLPSpec(widths, activation))
        self.d_in = d_in
        self.n_answers = n_answers

    def forward(self, *parts: torch.Tensor) -> torch.Tensor:
        x = torch.cat(parts, dim=-1) if len(parts) > 1 else parts[0]
        if x.shape[-1] != self.d_in:
            raise ConfigurationError(f"answer head expects width {self.d_in}, got {x.shape[-1]}")
        return self.f_ans(x)


def predict(s_bar: torch.Tensor, f_bar: torch.Tensor | None, head: AnswerHead) -> torch.Tensor:
    """Raw answer logits."""
    return head(s_bar) if f_bar is None else head(s_bar, f_bar)


def predicted_answer(scores: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, so ties go to the lowest index
    return torch.argmax(scores, dim=-1)


def vqa_loss(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with logits against soft targets, mean over all entries."""
    if scores.shape != targets.shape:
        raise ConfigurationError(f"scores {tuple(scores.shape)} vs targets {tuple(targets.shape)}")
    if ((targets < 0) | (targets > 1)).any():
        raise DomainError("answer targets must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(scores, targets, reduction="mean")


def total_loss(l_vqa: torch.Tensor, l_cl: torch.Tensor | float, weight: float = 1.0):
    if weight < 0:
        raise ConfigurationError("contrastive loss weight must be >= 0")
    if weight == 0:
        return l_vqa
    return l_vqa + weight * l_cl
