import numpy as np
import pytest
import torch
from torch import nn

from trireid.core import (
    MODALITIES,
    EnhancementMode,
    FeatureMap,
    MissingState,
    Modality,
    enumerate_missing_states,
)
from trireid.dem import (
    EnhancementEdge,
    EnhancementGraph,
    compose_final,
    compose_final_batch,
    cut_edges,
    enhance,
)
from trireid.encoder import gap

from oracles import (
    assert_grads_close,
    enhance_oracle,
    fd_param_gradients,
    randomize_parameters,
)

RGB, NIR, TIR = Modality.RGB, Modality.NIR, Modality.TIR


def graph(mode=EnhancementMode.DYNAMIC, channels=8, reduction=2, softmax=False, seed=0):
    torch.manual_seed(seed)
    g = EnhancementGraph(channels, reduction, softmax, mode)
    return g.eval()


def randomized_edge(channels=4, reduction=2, softmax=False, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    edge = EnhancementEdge(RGB, NIR, channels, reduction, softmax).to(dtype)
    randomize_parameters(edge, seed=seed + 1000, scale=0.5)
    return edge.eval()


def edge_weights(edge):
    return (
        edge.source_key.weight.detach().numpy(), edge.source_key.bias.detach().numpy(),
        edge.source_value.weight.detach().numpy(), edge.source_value.bias.detach().numpy(),
        edge.target_key.weight.detach().numpy(), edge.target_key.bias.detach().numpy(),
        edge.out_proj.weight.detach().numpy(), edge.out_proj.bias.detach().numpy(),
    )


# ---------------------------------------------------------------------------
# cut rule
# ---------------------------------------------------------------------------


def test_cut_dynamic_complete_keeps_all_six():
    g = graph()
    assert len(cut_edges(g, MissingState.complete())) == 6


def test_cut_dynamic_missing_tir():
    g = graph()
    surviving = cut_edges(g, MissingState.of(RGB, NIR))
    assert surviving == {(RGB, NIR), (RGB, TIR), (NIR, RGB), (NIR, TIR)}


def test_cut_dynamic_rgb_only():
    g = graph()
    assert cut_edges(g, MissingState.of(RGB)) == {(RGB, NIR), (RGB, TIR)}


def test_cut_dynamic_exhaustive():
    g = graph()
    for state in enumerate_missing_states():
        surviving = cut_edges(g, state)
        assert len(surviving) == 6 - 2 * len(state.missing)
        assert all(src in state.available for src, _ in surviving)


def test_cut_fixed_ignores_state():
    g = graph(EnhancementMode.FIXED)
    for state in enumerate_missing_states():
        assert cut_edges(g, state) == {(RGB, NIR), (RGB, TIR)}


def test_cut_single_direction_cycle():
    g = graph(EnhancementMode.SINGLE_DIRECTION)
    for state in enumerate_missing_states():
        assert cut_edges(g, state) == {(RGB, NIR), (NIR, TIR), (TIR, RGB)}


def test_cut_none_mode():
    g = graph(EnhancementMode.NONE)
    assert cut_edges(g, MissingState.complete()) == set()


def test_cut_rejects_empty_state():
    with pytest.raises(ValueError):
        cut_edges(graph(), MissingState(frozenset()))


# ---------------------------------------------------------------------------
# enhancement operator
# ---------------------------------------------------------------------------


def test_enhance_zeroed_projection_is_identity():
    edge = randomized_edge(seed=1)
    with torch.no_grad():
        nn.init.zeros_(edge.out_proj.weight)
        nn.init.zeros_(edge.out_proj.bias)
    f_src = FeatureMap(torch.randn(4, 3, 2), RGB)
    f_tgt = FeatureMap(torch.randn(4, 3, 2), NIR)
    out = enhance(edge, f_src, f_tgt)
    assert torch.equal(out.data, f_tgt.data)


def test_enhance_one_pixel_closed_form():
    # identity 1x1 convs, C=2, H=W=1: out = t + (s . t) * s
    edge = EnhancementEdge(RGB, NIR, channels=2, reduction=1)
    eye = torch.eye(2).reshape(2, 2, 1, 1)
    with torch.no_grad():
        for conv in (edge.source_key, edge.source_value, edge.target_key, edge.out_proj):
            conv.weight.copy_(eye)
            conv.bias.zero_()
    s = FeatureMap(torch.tensor([1.0, 2.0]).reshape(2, 1, 1), RGB)
    t = FeatureMap(torch.tensor([3.0, 4.0]).reshape(2, 1, 1), NIR)
    out = enhance(edge.eval(), s, t)
    # s.t = 1*3 + 2*4 = 11 -> [3 + 11*1, 4 + 11*2] = [14, 26]
    assert torch.allclose(out.data.flatten(), torch.tensor([14.0, 26.0]))


@pytest.mark.parametrize("softmax", [False, True])
def test_enhance_matches_loop_oracle(softmax):
    for seed in range(5):
        edge = randomized_edge(channels=4, reduction=2, softmax=softmax,
                               seed=seed, dtype=torch.float64)
        gen = torch.Generator().manual_seed(seed + 50)
        f_src = torch.randn(4, 2, 3, generator=gen, dtype=torch.float64)
        f_tgt = torch.randn(4, 2, 3, generator=gen, dtype=torch.float64)
        got = edge(f_src.unsqueeze(0), f_tgt.unsqueeze(0)).squeeze(0)
        want = enhance_oracle(
            f_src.numpy(), f_tgt.numpy(), *edge_weights(edge), softmax=softmax
        )
        np.testing.assert_allclose(got.detach().numpy(), want, atol=1e-10)


def test_enhance_shape_mismatch():
    edge = randomized_edge()
    with pytest.raises(ValueError):
        edge(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 3))


def test_enhance_gradients_match_finite_differences():
    edge = randomized_edge(channels=4, reduction=2, seed=7, dtype=torch.float64)
    gen = torch.Generator().manual_seed(70)
    f_src = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    f_tgt = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    w = torch.randn(4, 2, 2, generator=gen, dtype=torch.float64)

    params = list(edge.parameters())

    def value():
        return float((edge(f_src, f_tgt) * w).sum())

    for p in params:
        p.grad = None
    (edge(f_src, f_tgt) * w).sum().backward()
    analytic = [p.grad for p in params]
    numeric = fd_param_gradients(value, params)
    assert_grads_close(analytic, numeric, rtol=1e-3)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def features_for(state, channels=8, h=2, w=2, seed=3):
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for m in MODALITIES:
        prov = "extracted" if m in state.available else "recovered"
        out[m] = FeatureMap(
            torch.randn(channels, h, w, generator=gen), m, prov
        )
    return out


def test_compose_fresh_graph_is_double_raw_concat():
    # the zero-initialized output projections make every edge an identity
    g = graph(seed=4)
    state = MissingState.complete()
    feats = features_for(state)
    emb = compose_final(state, feats, g)
    raw = torch.cat([gap(feats[m].data) for m in MODALITIES])
    assert torch.allclose(emb.data, torch.cat([raw, raw]), atol=1e-7)


def test_compose_dim_constant_across_states():
    g = graph(seed=5)
    randomize_parameters(g, seed=55, scale=0.3)
    dims = set()
    for state in enumerate_missing_states():
        emb = compose_final(state, features_for(state), g)
        dims.add(emb.dim)
    assert dims == {6 * 8}


def test_compose_rgb_only_second_stack_structure():
    g = graph(seed=6)
    randomize_parameters(g, seed=66, scale=0.3)
    state = MissingState.of(RGB)
    feats = features_for(state)
    emb = compose_final(state, feats, g).data
    c = 8
    # surviving edges are rgb->nir and rgb->tir; rgb itself has no in-edge
    enh_nir = enhance(g.edge(RGB, NIR), feats[RGB], feats[NIR])
    enh_tir = enhance(g.edge(RGB, TIR), feats[RGB], feats[TIR])
    raw_rgb = gap(feats[RGB].data)
    # first stack: enhanced feature per node
    assert torch.allclose(emb[0:c], raw_rgb, atol=1e-6)
    assert torch.allclose(emb[c:2 * c], gap(enh_nir.data), atol=1e-6)
    assert torch.allclose(emb[2 * c:3 * c], gap(enh_tir.data), atol=1e-6)
    # second stack: raw where available, enhanced recovered otherwise
    assert torch.allclose(emb[3 * c:4 * c], raw_rgb, atol=1e-6)
    assert torch.allclose(emb[4 * c:5 * c], gap(enh_nir.data), atol=1e-6)
    assert torch.allclose(emb[5 * c:6 * c], gap(enh_tir.data), atol=1e-6)


def test_compose_complete_sums_in_edge_residuals():
    g = graph(seed=7)
    randomize_parameters(g, seed=77, scale=0.3)
    state = MissingState.complete()
    feats = features_for(state)
    emb = compose_final(state, feats, g).data
    c = 8
    # each node receives both of its in-edges, residuals summed
    for i, m in enumerate(MODALITIES):
        others = [o for o in MODALITIES if o != m]
        expected = feats[m].data.clone()
        for o in others:
            expected = expected + g.edge(o, m).residual(
                feats[o].data.unsqueeze(0), feats[m].data.unsqueeze(0)
            ).squeeze(0)
        assert torch.allclose(emb[i * c:(i + 1) * c], gap(expected), atol=1e-6)
        # second stack holds the raw pooled features for a complete state
        assert torch.allclose(
            emb[(3 + i) * c:(4 + i) * c], gap(feats[m].data), atol=1e-6
        )


def test_compose_deterministic():
    g = graph(seed=8)
    randomize_parameters(g, seed=88, scale=0.3)
    state = MissingState.of(RGB, TIR)
    feats = features_for(state)
    a = compose_final(state, feats, g)
    b = compose_final(state, feats, g)
    assert torch.equal(a.data, b.data)


def test_compose_batch_requires_all_modalities():
    g = graph(seed=9)
    with pytest.raises(ValueError):
        compose_final_batch(
            MissingState.complete(), {RGB: torch.randn(1, 8, 2, 2)}, g
        )
