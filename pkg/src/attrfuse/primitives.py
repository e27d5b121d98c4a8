"""Differentiable building blocks and the finite-difference gradient oracle.

Everything here operates on the trailing dimensions of its inputs, so the same
layer serves a single sample (``[n, d]``) or a stacked batch (``[B, n, d]``).
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    OracleInvalidError,
    PreconditionError,
)

ACTIVATIONS = ("relu", "gelu", "identity")
NORM_FLOOR = 1e-12
ROUNDOFF_ULPS = 4  # slack for rounding in the two perturbed loss evaluations


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs an input and an output width")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"MLP widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]


def _activate(x: torch.Tensor, name: str) -> torch.Tensor:
    if name == "relu":
        return F.relu(x)
    if name == "gelu":
        return F.gelu(x)
    return x


class MLP(nn.Module):
    """Stack of linear layers, activation between layers but not after the last."""

    def __init__(self, spec: MLPSpec):
        super().__init__()
        self.spec = spec
        widths = spec.layer_widths
        self.layers = nn.ModuleList(
            nn.Linear(w_in, w_out) for w_in, w_out in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if x.shape[-1] != layer.in_features:
                raise DimensionError(
                    f"MLP layer {i} expects width {layer.in_features}, got {x.shape[-1]}"
                )
            x = layer(x)
            if i < last:
                x = _activate(x, self.spec.activation)
        return x


def mlp_forward(x: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(x)


def softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if scores.numel() == 0 or scores.shape[dim] == 0:
        raise DomainError("softmax of an empty vector is undefined")
    shifted = scores - scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def cosine_similarity(
    a: torch.Tensor, b: torch.Tensor, diagnostics: Counter | None = None
) -> torch.Tensor:
    """Cosine along the last axis; zero-norm inputs are clamped, never NaN.

    Every clamped vector increments ``diagnostics["zero_norm"]`` when a counter
    is supplied.
    """
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if diagnostics is not None:
        diagnostics["zero_norm"] += int((na < NORM_FLOOR).sum()) + int((nb < NORM_FLOOR).sum())
    dot = (a * b).sum(dim=-1)
    cos = dot / (na.clamp_min(NORM_FLOOR) * nb.clamp_min(NORM_FLOOR))
    return cos.clamp(-1.0, 1.0)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor, diagnostics: Counter | None = None):
    """Matrix of cosines ``out[..., i, j] = cos(a[..., i, :], b[..., j, :])``."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if diagnostics is not None:
        diagnostics["zero_norm"] += int((na < NORM_FLOOR).sum()) + int((nb < NORM_FLOOR).sum())
    an = a / na.clamp_min(NORM_FLOOR)
    bn = b / nb.clamp_min(NORM_FLOOR)
    return (an @ bn.transpose(-1, -2)).clamp(-1.0, 1.0)


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention of ``query`` rows over ``key``/``value`` rows.

    Query/key/value projections carry no bias: a key bias only shifts every
    score of a query row by the same amount, so it would be a dead parameter.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads < 1 or d % heads != 0:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.out_proj = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.d_head).transpose(-2, -3)

    def forward(self, query, key, value, return_weights: bool = False):
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.shape[-1] != self.d:
                raise DimensionError(f"attention {name} width {t.shape[-1]} != {self.d}")
        if key.shape[-2] != value.shape[-2]:
            raise DimensionError("key and value must have the same number of rows")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = softmax(scores, dim=-1)  # [..., heads, n_q, n_k]
        mixed = (weights @ v).transpose(-2, -3)
        mixed = mixed.reshape(*mixed.shape[:-2], self.d)
        out = self.out_proj(mixed)
        return (out, weights) if return_weights else out


def multi_head_cross_attention(query, key, value, attn: MultiHeadCrossAttention):
    return attn(query, key, value)


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: self-attention sublayer then a 2-layer MLP sublayer."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d)
        self.attn = MultiHeadCrossAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = MLP(MLPSpec((d, ffn_mult * d, d), activation="gelu"))

    def forward(self, x, return_weights: bool = False):
        h = self.norm_attn(x)
        a, w = self.attn(h, h, h, return_weights=True)
        x = x + a
        x = x + self.ffn(self.norm_ffn(x))
        return (x, w) if return_weights else x


class SelfAttentionStack(nn.Module):
    """``layers`` pre-norm blocks followed by a final layer norm. No positional encoding."""

    def __init__(self, d: int, layers: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        if layers < 1:
            raise ConfigurationError("a self-attention stack needs at least one layer")
        if heads < 1 or d % heads != 0:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        self.blocks = nn.ModuleList(SelfAttentionBlock(d, heads, ffn_mult) for _ in range(layers))
        self.norm_out = nn.LayerNorm(d)

    def forward(self, x, return_weights: bool = False):
        weights = []
        for block in self.blocks:
            x, w = block(x, return_weights=True)
            weights.append(w)
        x = self.norm_out(x)
        return (x, weights) if return_weights else x


def self_attention_stack(x, stack: SelfAttentionStack):
    return stack(x)


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: Glorot-uniform weights, zero biases, unit layer-norm gains."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = math.sqrt(6.0 / (sub.in_features + sub.out_features))
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
    return module


@dataclass
class GradCheckFailure:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    within_roundoff: bool  # |analytic - numeric| is at most a few ulps of the loss over 2*eps


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_names: list[str] = field(default_factory=list)
    worst_name: str = ""
    n_checked: int = 0
    failures: list[GradCheckFailure] = field(default_factory=list)
    loss_value: float = 0.0
    roundoff: float = 0.0  # absolute resolution of the central difference

    @property
    def passed(self) -> bool:
        return not self.failing_names

    @property
    def all_failures_within_roundoff(self) -> bool:
        return all(f.within_roundoff for f in self.failures)


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, dict):
        return list(params.items())
    return list(params)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: nn.Module | dict | Iterable[tuple[str, torch.Tensor]],
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients with central differences, entry by entry.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not eps > 0:
        raise PreconditionError(f"finite-difference step must be positive, got {eps}")
    named = _named(params)
    if not named:
        raise PreconditionError("no parameters to check")
    for name, p in named:
        if p.dtype != torch.float64:
            raise PreconditionError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    with torch.no_grad():
        first = float(loss_fn())
        second = float(loss_fn())
    if first != second:
        raise OracleInvalidError(f"loss is not deterministic ({first!r} vs {second!r})")

    for _, p in named:
        p.grad = None
    loss = loss_fn()
    tensors = [p for _, p in named]
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    roundoff = ROUNDOFF_ULPS * math.ulp(abs(first)) / (2 * eps)
    worst, worst_name, failing, failures, count = 0.0, "", [], [], 0
    with torch.no_grad():
        for (name, p), g in zip(named, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            name_worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = gflat[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                name_worst = max(name_worst, rel)
                if rel >= tol:
                    failures.append(GradCheckFailure(name, i, a, numeric, rel,
                                                     abs(a - numeric) <= roundoff))
                count += 1
            if name_worst > worst:
                worst, worst_name = name_worst, name
            if name_worst >= tol:
                failing.append(name)
    return GradCheckReport(worst, failing, worst_name, count, failures, first, roundoff)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_finite(named: Sequence[tuple[str, torch.Tensor]]) -> str | None:
    """Name of the first tensor with a NaN/Inf entry, or None."""
    for name, t in named:
        if t is not None and not torch.isfinite(t).all():
            return name
    return None
