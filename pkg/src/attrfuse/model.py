"""Full model: attribute fusion, knowledge distillation and answer head, with ablation toggles.

With fusion disabled the attribute branch pools the raw visual object
features instead of fused attribute nodes; with distillation disabled the
pooling query is the mean question feature and the answer head sees the
pooled attribute vector alone.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .data import SampleRecord
from .distill import KnowledgeDistillation, TopDownAttention, contrastive_loss
from .fusion import AttributeFusion
from .head import AnswerHead, total_loss, vqa_loss
from .primitives import check_finite, init_parameters

DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass
class Batch:
    ids: list[str]
    question_types: list[str]
    visual: torch.Tensor
    attributes: torch.Tensor
    question: torch.Tensor
    knowledge: torch.Tensor
    caption: torch.Tensor
    targets: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[SampleRecord], streams: Sequence[str],
            dtype=torch.float64) -> list[tuple[list[int], Batch]]:
    """Stack samples into batches of identical tensor shapes.

    Returns ``(positions, batch)`` pairs; positions index into ``samples`` so
    outputs can be put back in the original order.
    """
    groups: dict[tuple, list[int]] = {}
    arrays = []
    for i, s in enumerate(samples):
        parts = (s.visual_features, s.attribute_embeddings, s.question_features,
                 s.knowledge(streams), s.caption_features, s.answer_targets)
        arrays.append(parts)
        groups.setdefault(tuple(p.shape for p in parts), []).append(i)
    out = []
    for positions in groups.values():
        stacked = [torch.as_tensor(np.stack([arrays[i][k] for i in positions]), dtype=dtype)
                   for k in range(6)]
        out.append((positions, Batch(
            ids=[samples[i].id for i in positions],
            question_types=[samples[i].question_type for i in positions],
            visual=stacked[0], attributes=stacked[1], question=stacked[2],
            knowledge=stacked[3], caption=stacked[4], targets=stacked[5],
        )))
    return out


@dataclass
class ModelOutput:
    scores: torch.Tensor
    s_bar: torch.Tensor
    s_proj: torch.Tensor
    f_bar: torch.Tensor | None
    trace: list[tuple[str, torch.Tensor]] = field(default_factory=list)


@dataclass
class LossParts:
    total: torch.Tensor
    vqa: torch.Tensor
    cl: torch.Tensor | None


class OAMVQA(nn.Module):
    def __init__(self, cfg: TrainConfig, n_answers: int):
        super().__init__()
        self.cfg = cfg
        self.n_answers = n_answers
        if cfg.afm_enabled:
            self.fusion = AttributeFusion(cfg.d_v, cfg.d_e, cfg.d_h, cfg.d_a, cfg.d_b,
                                          cfg.fusion_rounds, cfg.activation)
            d_s = self.fusion.out_semantic
        else:
            self.fusion = None
            d_s = cfg.d_v
        if cfg.ckdm_enabled:
            self.ckdm = KnowledgeDistillation(cfg.d_t, d_s, cfg.d, cfg.heads, cfg.g_att_layers,
                                              cfg.d_h, cfg.pool, cfg.ffn_mult,
                                              cfg.attention_activation)
            self.attend_attributes = None
        else:
            self.ckdm = None
            self.attend_attributes = TopDownAttention(d_s, cfg.d_t, cfg.d_h,
                                                      cfg.attention_activation)
        self.d_s = d_s
        self.project = nn.Linear(d_s, cfg.d) if d_s != cfg.d else nn.Identity()
        head_in = cfg.d * (2 if cfg.ckdm_enabled else 1)
        self.head = AnswerHead(head_in, n_answers, cfg.d_h, cfg.activation)
        self.diagnostics: Counter = Counter()
        self.to(DTYPES[cfg.precision])
        init_parameters(self, cfg.seed)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg.precision]

    def forward(self, batch: Batch) -> ModelOutput:
        trace = []
        if self.fusion is not None:
            v1, s1 = self.fusion(batch.visual, batch.attributes)
            trace += [("fusion.V1", v1), ("fusion.S1", s1)]
            nodes = s1
        else:
            nodes = batch.visual
        if self.ckdm is not None:
            st = self.ckdm(nodes, batch.question, batch.knowledge, batch.caption)
            trace += [("ckdm.Z", st.Z), ("ckdm.F", st.F), ("ckdm.S_bar", st.S_bar),
                      ("ckdm.F_bar", st.F_bar)]
            s_bar, f_bar = st.S_bar, st.F_bar
        else:
            s_bar, _ = self.attend_attributes(nodes, batch.question.mean(dim=-2))
            trace.append(("S_bar", s_bar))
            f_bar = None
        s_proj = self.project(s_bar)
        scores = self.head(s_proj) if f_bar is None else self.head(s_proj, f_bar)
        trace.append(("scores", scores))
        return ModelOutput(scores, s_bar, s_proj, f_bar, trace)

    def run(self, groups: list[tuple[list[int], Batch]]):
        """Forward uniform-shape groups and reassemble outputs in sample order."""
        outs = [(pos, self(b)) for pos, b in groups]
        if len(outs) == 1:
            return outs[0][1], groups[0][1].targets
        order = torch.as_tensor([p for pos, _ in outs for p in pos])
        inverse = torch.argsort(order)

        def cat(getter):
            parts = [getter(o) for _, o in outs]
            return None if parts[0] is None else torch.cat(parts)[inverse]

        merged = ModelOutput(cat(lambda o: o.scores), cat(lambda o: o.s_bar),
                             cat(lambda o: o.s_proj), cat(lambda o: o.f_bar),
                             [t for _, o in outs for t in o.trace])
        targets = torch.cat([b.targets for _, b in groups])[inverse]
        return merged, targets

    def losses(self, out: ModelOutput, targets: torch.Tensor) -> LossParts:
        l_vqa = vqa_loss(out.scores, targets)
        if self.cfg.contrastive_active:
            l_cl = contrastive_loss(out.s_proj, out.f_bar, self.cfg.contrastive_mode,
                                    self.cfg.temperature, self.diagnostics)
            return LossParts(total_loss(l_vqa, l_cl, self.cfg.cl_weight), l_vqa, l_cl)
        return LossParts(l_vqa, l_vqa, None)

    def first_nonfinite(self, out: ModelOutput) -> str | None:
        return check_finite(out.trace) or check_finite(list(self.named_parameters()))
