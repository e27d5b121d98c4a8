"""Attribute fusion: message passing over a visual/attribute bipartite graph.

Each image gives a graph with M visual nodes and L attribute (semantic) nodes.
Both subgraphs are complete and every visual node neighbours every semantic
node, so the neighbour sums below are plain sums over a whole axis.

Shapes follow ``[..., L, M]`` for edge quantities, with the semantic node on
the row axis, matching the relevance matrix ``r'[k][j]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DimensionError, SequencingError
from .primitives import MLP, MLPSpec, softmax


@dataclass
class MultimodalGraph:
    visual_nodes: torch.Tensor    # [..., M, d_v]
    semantic_nodes: torch.Tensor  # [..., L, d_e]
    updated_visual: torch.Tensor | None = None

    def __post_init__(self):
        if self.visual_nodes.shape[-2] < 1 or self.semantic_nodes.shape[-2] < 1:
            raise DimensionError("a multimodal graph needs at least one node per subgraph")
        if self.visual_nodes.shape[:-2] != self.semantic_nodes.shape[:-2]:
            raise DimensionError("visual and semantic nodes disagree on batch shape")

    @property
    def M(self) -> int:
        return self.visual_nodes.shape[-2]

    @property
    def L(self) -> int:
        return self.semantic_nodes.shape[-2]


class FusionRound(nn.Module):
    """Parameters of one visual-then-semantic aggregation round."""

    def __init__(self, d_v: int, d_e: int, d_h: int, d_a: int, d_b: int,
                 activation: str = "relu"):
        super().__init__()
        self.d_v, self.d_e, self.d_a, self.d_b = d_v, d_e, d_a, d_b
        self.f_v = MLP(MLPSpec((d_v, d_h, d_h), activation))
        self.f_s = MLP(MLPSpec((d_e, d_h, d_h), activation))
        self.f_s_prime = MLP(MLPSpec((d_e, d_a), activation))
        self.f_v_prime = MLP(MLPSpec((d_v + d_a, d_b), activation))

    def _check_graph(self, graph: MultimodalGraph) -> None:
        if graph.visual_nodes.shape[-1] != self.d_v:
            raise ConfigurationError(
                f"visual nodes have width {graph.visual_nodes.shape[-1]}, f_v expects {self.d_v}")
        if graph.semantic_nodes.shape[-1] != self.d_e:
            raise ConfigurationError(
                f"semantic nodes have width {graph.semantic_nodes.shape[-1]}, "
                f"f_s expects {self.d_e}")

    def pairwise_relevance(self, graph: MultimodalGraph) -> torch.Tensor:
        """``r'[k][j] = f_v(v_j) . f_s(s_k)``, shape ``[..., L, M]``."""
        self._check_graph(graph)
        fv = self.f_v(graph.visual_nodes)
        fs = self.f_s(graph.semantic_nodes)
        return fs @ fv.transpose(-1, -2)

    def update_visual_nodes(self, graph: MultimodalGraph, r_v: torch.Tensor) -> torch.Tensor:
        self._check_graph(graph)
        messages = self.f_s_prime(graph.semantic_nodes)          # [..., L, d_a]
        aggregated = r_v.transpose(-1, -2) @ messages            # [..., M, d_a]
        v1 = torch.cat([graph.visual_nodes, aggregated], dim=-1)
        graph.updated_visual = v1
        return v1

    def update_semantic_nodes(self, graph: MultimodalGraph, r_s: torch.Tensor,
                              v1: torch.Tensor | None = None) -> torch.Tensor:
        v1 = graph.updated_visual if v1 is None else v1
        if v1 is None:
            raise SequencingError("semantic nodes are updated from the updated visual nodes; "
                                  "run update_visual_nodes first")
        if v1.shape[-1] != self.d_v + self.d_a:
            raise SequencingError(f"expected updated visual nodes of width {self.d_v + self.d_a}, "
                                  f"got {v1.shape[-1]}")
        messages = self.f_v_prime(v1)                            # [..., M, d_b]
        aggregated = r_s @ messages                              # [..., L, d_b]
        return torch.cat([graph.semantic_nodes, aggregated], dim=-1)

    def forward(self, graph: MultimodalGraph):
        r = self.pairwise_relevance(graph)
        r_v = visual_attention_weights(r)
        r_s = semantic_attention_weights(r)
        v1 = self.update_visual_nodes(graph, r_v)
        s1 = self.update_semantic_nodes(graph, r_s, v1)
        return v1, s1, (r, r_v, r_s)


def visual_attention_weights(relevance: torch.Tensor) -> torch.Tensor:
    """Normalise each visual node's scores over its semantic neighbours (rows)."""
    return softmax(relevance, dim=-2)


def semantic_attention_weights(relevance: torch.Tensor) -> torch.Tensor:
    """Normalise each semantic node's scores over its visual neighbours (columns)."""
    return softmax(relevance, dim=-1)


class AttributeFusion(nn.Module):
    """One or more fusion rounds; round ``r`` consumes the widened nodes of round ``r-1``."""

    def __init__(self, d_v: int, d_e: int, d_h: int = 512, d_a: int = 512, d_b: int = 512,
                 rounds: int = 1, activation: str = "relu"):
        super().__init__()
        if rounds < 1:
            raise ConfigurationError("fusion needs at least one round")
        self.rounds = nn.ModuleList()
        for r in range(rounds):
            self.rounds.append(FusionRound(d_v + r * d_a, d_e + r * d_b, d_h, d_a, d_b, activation))
        self.out_visual = d_v + rounds * d_a
        self.out_semantic = d_e + rounds * d_b

    def forward(self, visual: torch.Tensor, semantic: torch.Tensor, return_weights: bool = False):
        weights = []
        v, s = visual, semantic
        for rnd in self.rounds:
            v, s, w = rnd(MultimodalGraph(v, s))
            weights.append(w)
        return (v, s, weights) if return_weights else (v, s)


def fuse(visual: torch.Tensor, semantic: torch.Tensor, fusion: AttributeFusion):
    """Updated visual and semantic node sets ``(V1, S1)``."""
    return fusion(visual, semantic)
