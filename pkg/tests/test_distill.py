import math
from collections import Counter

import pytest
import torch

import attrfuse.distill as distill
from attrfuse.data import FixtureConfig, synthetic_samples
from attrfuse.distill import (
    CompoundEncoder,
    KnowledgeDistillation,
    TopDownAttention,
    contrastive_loss,
    contrastive_terms,
    pool_query,
    top_down_attend,
)
from attrfuse.errors import ConfigurationError, DomainError
from attrfuse.model import collate
from attrfuse.primitives import grad_check, init_parameters, pairwise_cosine

from conftest import set_identity

MODES = ("paper_literal", "cross_pair")


def _encoder(d_t=6, d=8, heads=2, layers=1, seed=0):
    return init_parameters(CompoundEncoder(d_t, d_t, d, heads, layers), seed)


def test_channel_split_halves_the_width():
    enc = _encoder(d_t=10, d=64, heads=4)
    t, p = enc.channel_split(torch.randn(5, 10), torch.randn(3, 10))
    assert t.shape == (5, 32) and p.shape == (3, 32)


def test_channel_split_identity_maps():
    enc = CompoundEncoder(4, 4, 8, 2, 1)
    set_identity(enc.f_primary.layers[0])
    set_identity(enc.f_context.layers[0])
    t, p = torch.randn(3, 4), torch.randn(2, 4)
    tt, pp = enc.channel_split(t, p)
    assert torch.equal(tt, t) and torch.equal(pp, p)


def test_channel_split_grad_check():
    enc = _encoder()
    t, p = torch.randn(3, 6), torch.randn(2, 6)

    def loss():
        a, b = enc.channel_split(t, p)
        return (a ** 2).sum() + b.sum()

    params = {n: q for n, q in enc.named_parameters() if n.startswith(("f_primary", "f_context"))}
    assert grad_check(loss, params, eps=1e-6).max_rel_error < 1e-4


def test_compound_shape():
    enc = _encoder(d_t=12, d=64, heads=4, layers=2)
    z = enc(torch.randn(5, 12), torch.randn(3, 12))
    assert z.shape == (5 + 3, 64)


def test_single_knowledge_token_gets_all_attention():
    enc = _encoder()
    _, w = enc(torch.randn(4, 6), torch.randn(1, 6), return_weights=True)
    assert (w["cross_primary"] == 1.0).all()


def test_compound_attention_weights_normalise():
    enc = _encoder(layers=2)
    _, w = enc(torch.randn(4, 6), torch.randn(3, 6), return_weights=True)
    assert torch.allclose(w["cross_primary"].sum(-1), torch.ones(2, 4), atol=1e-9)
    assert torch.allclose(w["cross_context"].sum(-1), torch.ones(2, 3), atol=1e-9)
    for layer in w["self"]:
        assert torch.allclose(layer.sum(-1), torch.ones(2, 7), atol=1e-9)


def test_permuting_knowledge_permutes_trailing_rows_only():
    enc = _encoder(layers=2, seed=3)
    g = torch.Generator().manual_seed(4)
    t, p = torch.randn(5, 6, generator=g), torch.randn(3, 6, generator=g)
    perm = torch.randperm(3, generator=g)
    z, zp = enc(t, p), enc(t, p[perm])
    assert torch.allclose(zp[:5], z[:5], atol=1e-6)
    assert torch.allclose(zp[5:], z[5:][perm], atol=1e-6)


def test_caption_encoder_adds_caption_rows():
    ckdm = init_parameters(KnowledgeDistillation(6, 5, 8, 2, 1, 4), 0)
    z, f = ckdm.encode(torch.randn(4, 6), torch.randn(3, 6), torch.randn(2, 6))
    assert z.shape == (7, 8) and f.shape == (7 + 2, 8)


def test_pool_query_examples():
    a = torch.tensor([[1.0, -2.0, 3.0]])
    assert torch.equal(pool_query(a), a[0])
    assert torch.equal(pool_query(torch.cat([a, -a])), torch.zeros(3))
    x = torch.randn(5, 3)
    assert torch.allclose(pool_query(x[torch.randperm(5)]), pool_query(x), atol=1e-12)
    assert torch.equal(pool_query(x, "first"), x[0])
    with pytest.raises(DomainError):
        pool_query(torch.zeros(0, 3))


def _top_down(d_x=3, d_z=4, hidden=5, seed=0):
    return init_parameters(TopDownAttention(d_x, d_z, hidden), seed)


def test_top_down_single_row():
    attn = _top_down()
    x = torch.randn(1, 3)
    pooled, w = top_down_attend(x, torch.randn(4), attn)
    assert torch.equal(pooled, x[0]) and w.tolist() == [1.0]


def test_top_down_identical_rows():
    pooled, _ = top_down_attend(torch.tensor([[0.5, 1.5, -2.0]] * 4), torch.randn(4), _top_down())
    assert torch.allclose(pooled, torch.tensor([0.5, 1.5, -2.0]), atol=1e-12)


def test_top_down_zero_projection_is_uniform():
    attn = _top_down()
    with torch.no_grad():
        attn.W.weight.zero_()
    x = torch.randn(6, 3)
    pooled, w = top_down_attend(x, torch.randn(4), attn)
    assert torch.allclose(w, torch.full((6,), 1 / 6), atol=1e-12)
    assert torch.allclose(pooled, x.mean(0), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_top_down_weights_normalise(seed):
    g = torch.Generator().manual_seed(seed)
    n = int(torch.randint(1, 9, (1,), generator=g))
    _, w = _top_down(seed=seed)(torch.randn(n, 3, generator=g) * 4, torch.randn(4, generator=g))
    assert abs(w.sum().item() - 1) <= 1e-9


def test_top_down_rejects_bad_activation():
    with pytest.raises(ConfigurationError):
        TopDownAttention(3, 4, 5, "tanh")


@pytest.mark.parametrize("mode", MODES)
def test_contrastive_identical_pairs_give_log_two(mode):
    v = torch.tensor([[1.0, 2.0, 3.0]] * 2)
    assert contrastive_loss(v, v.clone(), mode).item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("n", [2, 4, 8])
def test_contrastive_equal_cosines_give_log_n(mode, n):
    # every pair of rows has cosine 1, whatever the magnitudes
    s = torch.rand(n, 1) * 5 + 0.1
    f = torch.rand(n, 1) * 5 + 0.1
    assert abs(contrastive_loss(s, f, mode).item() - math.log(n)) <= 1e-9


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("c", [-0.9, 0.0, 0.35, 1.0])
def test_contrastive_common_cosine_does_not_matter(mode, c):
    # one attribute direction and one knowledge direction shared by all 4 samples
    s = torch.tensor([[1.0, 0.0]]).repeat(4, 1)
    f = torch.tensor([[c, math.sqrt(1 - c * c)]]).repeat(4, 1) * torch.arange(1.0, 5.0)[:, None]
    assert abs(contrastive_loss(s, f, mode).item() - math.log(4)) <= 1e-9


def test_contrastive_perfect_separation_value():
    expected = -math.log(math.e / (math.e + math.exp(-1)))
    assert expected == pytest.approx(0.12693, abs=1e-5)
    # cross_pair: both anchors see positive cosine 1 and negative cosine -1
    s = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    assert contrastive_loss(s, s.clone(), "cross_pair").item() == pytest.approx(expected, abs=1e-12)
    # paper_literal: anchor 0 has positive 1 and the other pair's cosine -1 as its negative
    f = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    s = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    terms = contrastive_terms(s, f, "paper_literal")
    assert terms[0].item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_contrastive_scale_invariance(mode):
    g = torch.Generator().manual_seed(5)
    s, f = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
    base = contrastive_loss(s, f, mode).item()
    s2 = s.clone()
    s2[2] *= 7.5
    f2 = f.clone()
    f2[0] *= 0.01
    assert abs(contrastive_loss(s2, f, mode).item() - base) <= 1e-9
    assert abs(contrastive_loss(s, f2, mode).item() - base) <= 1e-9


def test_cross_pair_is_monotone_in_each_negative(monkeypatch):
    g = torch.Generator().manual_seed(6)
    cos = torch.rand(4, 4, generator=g) * 2 - 1
    monkeypatch.setattr(distill, "pairwise_cosine", lambda s, f, d=None: cos_now)
    dummy = torch.zeros(4, 2)
    cos_now = cos
    base = contrastive_loss(dummy, dummy, "cross_pair").item()
    h = 1e-4
    for i in range(4):
        for b in range(4):
            if i == b:
                continue
            cos_now = cos.clone()
            cos_now[i, b] -= h
            assert contrastive_loss(dummy, dummy, "cross_pair").item() < base


def test_contrastive_needs_negatives():
    with pytest.raises(DomainError):
        contrastive_loss(torch.ones(1, 3), torch.ones(1, 3))
    with pytest.raises(ConfigurationError):
        contrastive_loss(torch.ones(2, 3), torch.ones(2, 3), "nope")


def test_contrastive_zero_vectors_stay_finite():
    diag = Counter()
    loss = contrastive_loss(torch.zeros(3, 4), torch.randn(3, 4), "cross_pair", diagnostics=diag)
    assert torch.isfinite(loss)
    assert diag["zero_norm"] > 0


def _ckdm_batch(n, seed=0, zero_captions=False):
    samples, _ = synthetic_samples(FixtureConfig(
        n_samples=n, M=3, L=4, d_v=6, d_e=6, d_t=6, n_t=3, n_p=2, n_c=2, vocab_size=4,
        attribute_words=0, seed=seed))
    (_, batch), = collate(samples, ["synthetic"])
    if zero_captions:
        batch.caption = torch.zeros_like(batch.caption)
    return batch


def _ckdm(seed=0):
    return init_parameters(KnowledgeDistillation(6, 6, 8, 2, 1, 6), seed)


def test_ckdm_forward_state():
    ckdm = _ckdm()
    b = _ckdm_batch(2)
    st = ckdm(b.attributes, b.question, b.knowledge, b.caption)
    assert st.S_bar.shape == (2, 6) and st.F_bar.shape == (2, 8)
    assert st.Z.shape == (2, 5, 8) and st.F.shape == (2, 7, 8)
    # pooled vectors are convex combinations of their source rows
    assert torch.allclose(st.S_bar, (st.attribute_weights.unsqueeze(-1) * b.attributes).sum(1))
    assert torch.allclose(st.attribute_weights.sum(-1), torch.ones(2), atol=1e-9)
    assert torch.allclose(st.knowledge_weights.sum(-1), torch.ones(2), atol=1e-9)


def _cl_loss(ckdm, proj, b, mode):
    st = ckdm(b.attributes, b.question, b.knowledge, b.caption)
    return contrastive_loss(proj(st.S_bar), st.F_bar, mode)


@pytest.mark.parametrize("mode", MODES)
def test_ckdm_contrastive_grad_check(mode):
    ckdm = _ckdm(seed=1)
    proj = init_parameters(torch.nn.Linear(6, 8), 1)
    b = _ckdm_batch(3, seed=1)
    params = dict(ckdm.named_parameters())
    params.update({f"proj.{n}": p for n, p in proj.named_parameters()})
    report = grad_check(lambda: _cl_loss(ckdm, proj, b, mode), params, eps=1e-5)
    assert report.max_rel_error < 1e-4, (report.worst_name, report.max_rel_error)


def _shift_null(attn, x, z, index):
    """True when W entry ``index`` multiplies the query and its hidden unit is
    active on every row: the entry then shifts all scores of a sample equally
    and softmax makes its gradient exactly zero."""
    unit, col = divmod(index, attn.W.in_features)
    if col < attn.d_x:
        return False
    zz = z.unsqueeze(-2).expand(*x.shape[:-1], z.shape[-1])
    pre = attn.W(torch.cat([x, zz], dim=-1))[..., unit]
    return bool((pre > 0).all())


@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_ckdm_full_forward_grad_check(activation):
    ckdm = init_parameters(KnowledgeDistillation(6, 6, 8, 2, 1, 6,
                                                 attention_activation=activation), 2)
    b = _ckdm_batch(2, seed=2)
    g = torch.Generator().manual_seed(2)
    ws, wf = torch.randn(2, 6, generator=g), torch.randn(2, 8, generator=g)

    def loss():
        st = ckdm(b.attributes, b.question, b.knowledge, b.caption)
        return (st.S_bar * ws).sum() + (st.F_bar * wf).sum()

    report = grad_check(loss, ckdm, eps=1e-5)
    if activation == "gelu":
        assert report.passed, (report.worst_name, report.max_rel_error)
        return
    # relu: any entry over tolerance must be an exact structural zero that the
    # central difference can only resolve to one rounding step of the loss
    with torch.no_grad():
        st = ckdm(b.attributes, b.question, b.knowledge, b.caption)
    sources = {"attend_attributes.W.weight": (ckdm.attend_attributes, b.attributes),
               "attend_knowledge.W.weight": (ckdm.attend_knowledge, st.F)}
    for f in report.failures:
        assert f.name in sources, f
        attn, x = sources[f.name]
        assert abs(f.analytic) < 1e-15 and f.within_roundoff, f
        assert _shift_null(attn, x, st.query, f.index), f
    others = [f for f in report.failures if f.name not in sources]
    assert not others


def _mean_positive_cosine(ckdm, proj, b):
    with torch.no_grad():
        st = ckdm(b.attributes, b.question, b.knowledge, b.caption)
        return torch.diagonal(pairwise_cosine(proj(st.S_bar), st.F_bar)).mean().item()


@pytest.mark.parametrize("zero_captions", [False, True])
def test_distillation_aligns_positive_pairs(zero_captions):
    torch.manual_seed(0)
    ckdm = _ckdm(seed=3)
    proj = init_parameters(torch.nn.Linear(6, 8), 3)
    b = _ckdm_batch(16, seed=3, zero_captions=zero_captions)
    opt = torch.optim.Adam([*ckdm.parameters(), *proj.parameters()], lr=1e-3)
    before = _mean_positive_cosine(ckdm, proj, b)
    first = None
    for _ in range(200):
        opt.zero_grad()
        loss = _cl_loss(ckdm, proj, b, "cross_pair")
        assert torch.isfinite(loss)
        first = loss.item() if first is None else first
        loss.backward()
        opt.step()
    after = _mean_positive_cosine(ckdm, proj, b)
    assert after - before >= 0.1, (before, after)
    assert loss.item() < first
