import math

import pytest
import torch

from attrfuse.errors import ConfigurationError, SequencingError
from attrfuse.fusion import (
    AttributeFusion,
    FusionRound,
    MultimodalGraph,
    fuse,
    semantic_attention_weights,
    visual_attention_weights,
)
from attrfuse.primitives import grad_check, init_parameters

from conftest import set_identity


def _identity_round(d=2):
    rnd = FusionRound(d, d, d, d, d)
    for mlp in (rnd.f_v, rnd.f_s, rnd.f_s_prime):
        for layer in mlp.layers:
            set_identity(layer)
    # f_v' maps the widened visual node back to d: keep the original half
    set_identity(rnd.f_v_prime.layers[0])
    return rnd


def _graph(v, s):
    return MultimodalGraph(torch.tensor(v, dtype=torch.float64), torch.tensor(s, dtype=torch.float64))


def test_relevance_hand_examples():
    rnd = _identity_round()
    assert rnd.pairwise_relevance(_graph([[1.0, 0.0]], [[1.0, 0.0]])).item() == 1.0
    assert rnd.pairwise_relevance(_graph([[1.0, 0.0]], [[0.0, 1.0]])).item() == 0.0
    # identity maps with relu pass non-negative inputs unchanged
    assert rnd.pairwise_relevance(_graph([[3.0, 4.0]], [[3.0, 4.0]])).item() == 25.0


def test_relevance_shape_is_semantic_by_visual():
    rnd = init_parameters(FusionRound(3, 5, 4, 2, 2), 0)
    g = MultimodalGraph(torch.randn(4, 3), torch.randn(6, 5))
    assert rnd.pairwise_relevance(g).shape == (6, 4)


def test_visual_weights_examples():
    w = visual_attention_weights(torch.tensor([[1.0], [0.0]]))
    assert w[:, 0].tolist() == pytest.approx([0.73106, 0.26894], abs=1e-5)
    assert (visual_attention_weights(torch.randn(1, 5)) == 1.0).all()
    assert visual_attention_weights(torch.full((4, 1), 2.5))[:, 0].tolist() == [0.25] * 4


def test_semantic_weights_examples():
    assert (semantic_attention_weights(torch.randn(5, 1)) == 1.0).all()
    assert semantic_attention_weights(torch.tensor([[2.0, 2.0]])).tolist() == [[0.5, 0.5]]
    w = semantic_attention_weights(torch.tensor([[1.0, 0.0, 0.0]]))
    assert w[0].tolist() == pytest.approx([0.57612, 0.21194, 0.21194], abs=1e-5)


@pytest.mark.parametrize("seed", range(200))
def test_weight_maps_normalise(seed):
    g = torch.Generator().manual_seed(seed)
    L, M = (int(x) for x in torch.randint(1, 9, (2,), generator=g))
    r = torch.randn(L, M, generator=g) * 5
    assert torch.allclose(visual_attention_weights(r).sum(0), torch.ones(M), atol=1e-9, rtol=0)
    assert torch.allclose(semantic_attention_weights(r).sum(1), torch.ones(L), atol=1e-9, rtol=0)


def test_single_semantic_node_concatenates_it():
    rnd = _identity_round()
    g = _graph([[1.0, 2.0], [-1.0, 0.5]], [[0.3, 0.7]])
    v1, _, _ = rnd(g)
    assert torch.equal(v1, torch.tensor([[1.0, 2.0, 0.3, 0.7], [-1.0, 0.5, 0.3, 0.7]]))


def test_single_visual_node_feeds_every_semantic_node():
    rnd = init_parameters(FusionRound(2, 3, 4, 2, 5), 1)
    g = MultimodalGraph(torch.randn(1, 2), torch.randn(4, 3))
    v1, s1, _ = rnd(g)
    expected = rnd.f_v_prime(v1[0])
    for k in range(4):
        assert torch.allclose(s1[k, 3:], expected, atol=1e-12)
        assert torch.equal(s1[k, :3], g.semantic_nodes[k])


def test_degenerate_graph_is_two_concatenations():
    rnd = init_parameters(FusionRound(2, 2, 3, 2, 2), 2)
    v, s = torch.randn(1, 2), torch.randn(1, 2)
    v1, s1, (_, r_v, r_s) = rnd(MultimodalGraph(v, s))
    assert r_v.item() == 1.0 and r_s.item() == 1.0
    assert torch.allclose(v1, torch.cat([v, rnd.f_s_prime(s)], -1))
    assert torch.allclose(s1, torch.cat([s, rnd.f_v_prime(v1)], -1))


@torch.no_grad()
def _brute_force(rnd, v, s):
    M, L = v.shape[0], s.shape[0]
    fv = [rnd.f_v(v[j]) for j in range(M)]
    fs = [rnd.f_s(s[k]) for k in range(L)]
    r = [[float(sum(fv[j][h] * fs[k][h] for h in range(len(fv[j])))) for j in range(M)]
         for k in range(L)]
    v1 = []
    for j in range(M):
        z = sum(math.exp(r[k][j]) for k in range(L))
        msg = sum(math.exp(r[k][j]) / z * rnd.f_s_prime(s[k]) for k in range(L))
        v1.append(torch.cat([v[j], msg]))
    s1 = []
    for k in range(L):
        z = sum(math.exp(r[k][j]) for j in range(M))
        msg = sum(math.exp(r[k][j]) / z * rnd.f_v_prime(v1[j]) for j in range(M))
        s1.append(torch.cat([s[k], msg]))
    return torch.stack(v1), torch.stack(s1)


@pytest.mark.parametrize("M", [1, 2, 3])
@pytest.mark.parametrize("L", [1, 2, 3])
def test_matches_per_edge_oracle(M, L):
    rnd = init_parameters(FusionRound(3, 4, 5, 2, 3), seed=10 * M + L)
    g = torch.Generator().manual_seed(M * 7 + L)
    v, s = torch.randn(M, 3, generator=g), torch.randn(L, 4, generator=g)
    v1, s1, _ = rnd(MultimodalGraph(v, s))
    bv, bs = _brute_force(rnd, v, s)
    assert v1.shape == (M, 3 + 2) and s1.shape == (L, 4 + 3)
    assert torch.allclose(v1, bv, atol=1e-9, rtol=0)
    assert torch.allclose(s1, bs, atol=1e-9, rtol=0)


def test_identity_maps_match_oracle_on_two_by_two():
    rnd = _identity_round()
    v, s = torch.tensor([[1.0, 0.5], [0.2, 0.1]]), torch.tensor([[0.3, 0.9], [1.0, 0.0]])
    v1, s1, _ = rnd(MultimodalGraph(v, s))
    bv, bs = _brute_force(rnd, v, s)
    assert torch.allclose(v1, bv, atol=1e-12) and torch.allclose(s1, bs, atol=1e-12)


def test_permutation_behaviour():
    rnd = init_parameters(FusionRound(3, 4, 5, 2, 3), 3)
    g = torch.Generator().manual_seed(4)
    v, s = torch.randn(5, 3, generator=g), torch.randn(6, 4, generator=g)
    v1, s1, _ = rnd(MultimodalGraph(v, s))
    ps, pv = torch.randperm(6, generator=g), torch.randperm(5, generator=g)
    v1s, s1s, _ = rnd(MultimodalGraph(v, s[ps]))
    assert torch.allclose(v1s, v1, atol=1e-9, rtol=0)
    assert torch.allclose(s1s, s1[ps], atol=1e-9, rtol=0)
    v1v, s1v, _ = rnd(MultimodalGraph(v[pv], s))
    assert torch.allclose(v1v, v1[pv], atol=1e-9, rtol=0)
    assert torch.allclose(s1v, s1, atol=1e-9, rtol=0)


def test_scaling_scores_keeps_normalisation():
    rnd = init_parameters(FusionRound(3, 3, 4, 2, 2), 5)
    g = MultimodalGraph(torch.randn(3, 3), torch.randn(4, 3))
    _, _, (r, r_v, _) = rnd(g)
    with torch.no_grad():
        rnd.f_v.layers[-1].weight.mul_(2)
    _, _, (r2, r_v2, r_s2) = rnd(g)
    assert torch.allclose(r2, 2 * r)
    assert not torch.allclose(r_v2, r_v)
    assert torch.allclose(r_v2.sum(0), torch.ones(3), atol=1e-9)
    assert torch.allclose(r_s2.sum(1), torch.ones(4), atol=1e-9)


def test_semantic_update_before_visual_update_is_a_sequencing_error():
    rnd = init_parameters(FusionRound(3, 3, 4, 2, 2), 6)
    g = MultimodalGraph(torch.randn(2, 3), torch.randn(2, 3))
    r_s = semantic_attention_weights(rnd.pairwise_relevance(g))
    with pytest.raises(SequencingError):
        rnd.update_semantic_nodes(g, r_s)


def test_width_mismatch_is_a_configuration_error():
    rnd = FusionRound(3, 3, 4, 2, 2)
    with pytest.raises(ConfigurationError):
        rnd.pairwise_relevance(MultimodalGraph(torch.randn(2, 5), torch.randn(2, 3)))


def test_batched_fusion_matches_per_sample():
    fusion = init_parameters(AttributeFusion(3, 4, 5, 2, 3), 7)
    v, s = torch.randn(3, 4, 3), torch.randn(3, 2, 4)
    bv, bs = fuse(v, s, fusion)
    for i in range(3):
        sv, ss = fuse(v[i], s[i], fusion)
        assert torch.allclose(bv[i], sv, atol=1e-12) and torch.allclose(bs[i], ss, atol=1e-12)


def test_multiple_rounds_widen_nodes():
    fusion = init_parameters(AttributeFusion(3, 4, 5, 2, 3, rounds=2), 8)
    v1, s1 = fusion(torch.randn(2, 3), torch.randn(3, 4))
    assert v1.shape == (2, 3 + 2 * 2) and s1.shape == (3, 4 + 2 * 3)
    assert (fusion.out_visual, fusion.out_semantic) == (7, 10)


def test_fuse_grad_check_reaches_every_parameter():
    fusion = init_parameters(AttributeFusion(3, 3, 4, 2, 2), 9)
    g = torch.Generator().manual_seed(10)
    v, s = torch.randn(3, 3, generator=g), torch.randn(2, 3, generator=g)
    wv, ws = torch.randn(3, 5, generator=g), torch.randn(2, 5, generator=g)

    def loss():
        v1, s1 = fuse(v, s, fusion)
        return (v1 * wv).sum() + (s1 * ws).sum()

    report = grad_check(loss, fusion, eps=1e-6)
    assert report.max_rel_error < 1e-4, report
    loss().backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in fusion.parameters())
