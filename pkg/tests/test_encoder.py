import numpy as np
import pytest
import torch
from torch import nn

from trireid.core import ConfigError, FeatureMap, Modality
from trireid.encoder import (
    AttentionBlock,
    BranchEncoder,
    apply_attention,
    extract,
    gap,
    global_average_pool,
    replicate_channels,
)

from oracles import assert_grads_close, fd_tensor_gradient, gap_oracle


def toy_branch(widths=(8, 16, 32, 64), **kw):
    return BranchEncoder(Modality.RGB, in_channels=3, widths=widths, **kw)


def test_extract_shape_64x32():
    # 4 stride-2 blocks: 64x32 -> 32x16 -> 16x8 -> 8x4 -> 4x2
    torch.manual_seed(0)
    branch = toy_branch().eval()
    fm = extract(branch, torch.rand(3, 64, 32))
    assert fm.shape == (64, 4, 2)
    assert fm.provenance == "extracted"
    assert fm.modality is Modality.RGB


def test_extract_zero_image_is_finite():
    torch.manual_seed(0)
    branch = toy_branch().eval()
    fm = extract(branch, torch.zeros(3, 64, 32))
    assert torch.isfinite(fm.data).all()


def test_extract_distinguishes_inputs():
    torch.manual_seed(1)
    branch = toy_branch().eval()
    a = extract(branch, torch.rand(3, 64, 32))
    b = extract(branch, torch.rand(3, 64, 32))
    assert not torch.allclose(a.data, b.data)


def test_extract_rejects_bad_shapes():
    branch = toy_branch().eval()
    with pytest.raises(ConfigError):
        extract(branch, torch.rand(2, 64, 32))  # 2 channels cannot be adapted
    with pytest.raises(ConfigError):
        extract(branch, torch.rand(3, 64))


def test_replicate_channels():
    x = torch.rand(1, 4, 4)
    y = replicate_channels(x, 3)
    assert y.shape == (3, 4, 4)
    assert torch.equal(y[0], x[0]) and torch.equal(y[2], x[0])
    assert replicate_channels(y, 3) is y
    with pytest.raises(ConfigError):
        replicate_channels(torch.rand(2, 4, 4), 3)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def saturated_attention(channels, bias):
    """Zero every weight, push the gate biases to `bias`."""
    torch.manual_seed(0)
    block = AttentionBlock(channels, reduction=2)
    for p in block.parameters():
        nn.init.zeros_(p)
    with torch.no_grad():
        block.channel_gate.mlp[-1].bias.fill_(bias)
        block.spatial_gate.conv.bias.fill_(bias)
    return block.eval()


def test_attention_identity_when_gates_saturate():
    # sigmoid(2 * 100) and sigmoid(100) round to exactly 1.0
    block = saturated_attention(4, bias=100.0)
    f = FeatureMap(torch.randn(4, 5, 3), Modality.NIR)
    out = apply_attention(block, f)
    assert torch.equal(out.data, f.data)
    assert out.modality is f.modality


def test_attention_half_gates_quarter_output():
    # all-zero parameters give sigmoid(0) = 0.5 for both gates
    block = saturated_attention(4, bias=0.0)
    f = FeatureMap(torch.randn(4, 5, 3), Modality.TIR)
    out = apply_attention(block, f)
    assert torch.equal(out.data, 0.25 * f.data)


def test_attention_zero_input_zero_output():
    torch.manual_seed(2)
    block = AttentionBlock(4).eval()
    f = FeatureMap(torch.zeros(4, 3, 3), Modality.RGB)
    assert torch.equal(apply_attention(block, f).data, torch.zeros(4, 3, 3))


def test_attention_preserves_shape_and_gate_range():
    torch.manual_seed(3)
    block = AttentionBlock(8, reduction=4).eval()
    x = torch.randn(2, 8, 6, 5)
    assert block(x).shape == x.shape
    cg = block.channel_gate(x)
    sg = block.spatial_gate(x)
    assert ((cg > 0) & (cg < 1)).all()
    assert ((sg > 0) & (sg < 1)).all()


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def test_gap_constant_map():
    f = FeatureMap(torch.full((3, 4, 4), 2.5), Modality.RGB)
    assert torch.equal(global_average_pool(f), torch.full((3,), 2.5))


def test_gap_single_entry():
    data = torch.zeros(2, 4, 8)
    data[1, 2, 5] = 3.0
    f = FeatureMap(data, Modality.RGB)
    pooled = global_average_pool(f)
    assert pooled[0] == 0
    assert pooled[1] == pytest.approx(3.0 / 32)


def test_gap_matches_oracle():
    torch.manual_seed(4)
    x = torch.randn(4, 2, 2, dtype=torch.float64)
    np.testing.assert_allclose(gap(x).numpy(), gap_oracle(x.numpy()), atol=1e-12)


# ---------------------------------------------------------------------------
# gradients and parameter isolation
# ---------------------------------------------------------------------------


def test_extract_pool_gradient_matches_finite_differences():
    torch.manual_seed(5)
    branch = BranchEncoder(Modality.RGB, widths=(4, 8), attention_reduction=2)
    branch = branch.double().eval()
    x = torch.randn(3, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(8, dtype=torch.float64)

    loss = (gap(branch(x.unsqueeze(0)).squeeze(0)) * w).sum()
    loss.backward()

    def value():
        return float((gap(branch(x.unsqueeze(0)).squeeze(0)) * w).sum())

    numeric = fd_tensor_gradient(value, x.data)
    assert_grads_close([x.grad], [numeric], rtol=1e-3)


def test_branches_are_parameter_independent():
    torch.manual_seed(6)
    branches = {
        m: BranchEncoder(m, widths=(4, 8), attention_reduction=2)
        for m in (Modality.RGB, Modality.NIR, Modality.TIR)
    }
    params = [p for b in branches.values() for p in b.parameters()]
    opt = torch.optim.SGD(params, lr=0.1, momentum=0.9, weight_decay=5e-4)
    before = {
        m: [p.detach().clone() for p in b.parameters()] for m, b in branches.items()
    }
    # only the RGB branch carries gradient
    out = branches[Modality.RGB](torch.rand(2, 3, 16, 16))
    out.sum().backward()
    opt.step()
    changed = {
        m: any(not torch.equal(p, q) for p, q in zip(before[m], list(b.parameters())))
        for m, b in branches.items()
    }
    assert changed[Modality.RGB]
    assert not changed[Modality.NIR]
    assert not changed[Modality.TIR]


def test_per_block_attention_position():
    branch = BranchEncoder(
        Modality.NIR, widths=(4, 8), attention_position="per_block", attention_reduction=2
    ).eval()
    fm = extract(branch, torch.rand(1, 16, 16))
    assert fm.shape == (8, 4, 4)
    n_attn = sum(isinstance(m, AttentionBlock) for m in branch.body)
    assert n_attn == 2
