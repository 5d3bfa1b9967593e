import math

import numpy as np
import pytest
import torch

from trireid.objectives import (
    ClassifierHead,
    LossReport,
    batch_hard_mine,
    batch_hard_triplet,
    smoothed_ce,
    smoothed_ce_batch,
    total_loss,
    triplet_loss,
)

from oracles import (
    assert_grads_close,
    fd_tensor_gradient,
    mining_oracle,
    smoothed_ce_oracle,
)


def test_triplet_hand_cases():
    assert triplet_loss(torch.tensor(0.2), torch.tensor(0.9), 0.3).item() == 0.0
    assert triplet_loss(torch.tensor(0.9), torch.tensor(0.2), 0.3).item() == pytest.approx(1.0)


def test_triplet_nonnegative_and_zero_condition():
    gen = torch.Generator().manual_seed(0)
    d_ap = torch.rand(100, generator=gen)
    d_an = torch.rand(100, generator=gen)
    loss = triplet_loss(d_ap, d_an, 0.3)
    assert (loss >= 0).all()
    zero = loss == 0
    assert torch.equal(zero, d_an >= d_ap + 0.3)


def test_batch_hard_square_corners():
    # ids: 0 at (0,0) and (0,1); 1 at (1,0) and (1,1)
    emb = torch.tensor([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    labels = torch.tensor([0, 0, 1, 1])
    d_ap, d_an = batch_hard_mine(emb, labels)
    # hardest positive is the other corner on the same side (distance 1);
    # hardest negative is the horizontally adjacent corner (distance 1)
    assert torch.allclose(d_ap, torch.ones(4), atol=1e-5)
    assert torch.allclose(d_an, torch.ones(4), atol=1e-5)
    assert batch_hard_triplet(emb, labels, 0.3).item() == pytest.approx(0.3, abs=1e-6)


def test_batch_hard_identical_embeddings():
    emb = torch.ones(6, 4)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    d_ap, d_an = batch_hard_mine(emb, labels)
    # distances are clamped at sqrt(1e-12) for gradient stability
    assert torch.allclose(d_ap, torch.zeros(6), atol=1e-5)
    assert torch.allclose(d_an, torch.zeros(6), atol=1e-5)
    assert batch_hard_triplet(emb, labels, 0.3).item() == pytest.approx(0.3)


def test_batch_hard_single_identity_rejected():
    with pytest.raises(ValueError):
        batch_hard_mine(torch.randn(4, 3), torch.zeros(4, dtype=torch.long))


def test_batch_hard_singleton_identity_rejected():
    with pytest.raises(ValueError):
        batch_hard_mine(torch.randn(3, 2), torch.tensor([0, 0, 1]))


def test_batch_hard_matches_loop_oracle():
    gen = torch.Generator().manual_seed(1)
    emb = torch.randn(8, 5, generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    d_ap, d_an = batch_hard_mine(emb, labels)
    expected = mining_oracle(emb.numpy(), labels.tolist())
    for i, (ap, an) in enumerate(expected):
        assert d_ap[i].item() == pytest.approx(ap, abs=1e-9)
        assert d_an[i].item() == pytest.approx(an, abs=1e-9)


# ---------------------------------------------------------------------------
# label-smoothed cross entropy
# ---------------------------------------------------------------------------


def test_smoothed_ce_uniform_logits():
    logits = torch.zeros(4, dtype=torch.float64)
    assert smoothed_ce(logits, 2, 0.0, 4).item() == pytest.approx(math.log(4), abs=1e-12)
    # uniform logits give ln N for every beta
    for beta in (0.0, 0.1, 0.5, 0.9):
        got = smoothed_ce(torch.zeros(10, dtype=torch.float64), 3, beta, 10)
        assert got.item() == pytest.approx(math.log(10), abs=1e-12)


def test_smoothed_ce_beta_zero_is_plain_ce():
    gen = torch.Generator().manual_seed(2)
    logits = torch.randn(7, generator=gen, dtype=torch.float64)
    want = -torch.log_softmax(logits, 0)[4].item()
    assert smoothed_ce(logits, 4, 0.0, 7).item() == pytest.approx(want, abs=1e-12)


def test_smoothed_ce_matches_loop_oracle():
    gen = torch.Generator().manual_seed(3)
    for trial in range(20):
        n = int(torch.randint(2, 12, (1,), generator=gen))
        y = int(torch.randint(0, n, (1,), generator=gen))
        beta = float(torch.rand(1, generator=gen)) * 0.9
        logits = torch.randn(n, generator=gen, dtype=torch.float64) * 3
        got = smoothed_ce(logits, y, beta, n).item()
        want = smoothed_ce_oracle(logits.tolist(), y, beta)
        assert got == pytest.approx(want, abs=1e-9)


def test_smoothed_ce_batch_matches_singles():
    gen = torch.Generator().manual_seed(4)
    logits = torch.randn(5, 6, generator=gen, dtype=torch.float64)
    targets = torch.tensor([0, 5, 2, 3, 1])
    got = smoothed_ce_batch(logits, targets, 0.1).item()
    want = np.mean([
        smoothed_ce(logits[i], int(targets[i]), 0.1, 6).item() for i in range(5)
    ])
    assert got == pytest.approx(want, abs=1e-12)


def test_smoothed_ce_validates_inputs():
    with pytest.raises(ValueError):
        smoothed_ce(torch.zeros(4), 0, 1.0, 4)
    with pytest.raises(ValueError):
        smoothed_ce(torch.zeros(4), 4, 0.1, 4)
    with pytest.raises(ValueError):
        smoothed_ce(torch.zeros(5), 0, 0.1, 4)


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def test_total_loss_arithmetic():
    report = total_loss(1.0, 2.0, 3.0, 4.0, rho=1.0, mu=1.0)
    assert report.total == pytest.approx(10.0)
    assert total_loss(1.0, 2.0, 3.0, 4.0, rho=0.0, mu=0.0).total == pytest.approx(3.0)
    assert total_loss(1.0, 2.0, 3.0, 4.0, rho=2.0, mu=0.5).total == pytest.approx(11.0)


def test_total_loss_linear_in_weights():
    base = total_loss(0.5, 0.25, 2.0, 3.0, rho=0.0, mu=0.0).total
    for rho in (0.5, 1.0, 2.0):
        for mu in (0.25, 1.0):
            got = total_loss(0.5, 0.25, 2.0, 3.0, rho=rho, mu=mu).total
            assert got == pytest.approx(base + rho * 2.0 + mu * 3.0)


def test_total_loss_identity_invariant():
    r = total_loss(0.3, 0.7, 1.1, 0.2, rho=1.5, mu=0.25)
    assert r.total == pytest.approx(r.l_tri + r.l_ce + 1.5 * r.l_rec + 0.25 * r.l_sim)


def test_total_loss_rejects_nonfinite():
    with pytest.raises(RuntimeError):
        total_loss(float("nan"), 0.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(RuntimeError):
        LossReport(l_tri=0.0, l_ce=float("inf"), l_rec=0.0, l_sim=0.0, total=0.0)


# ---------------------------------------------------------------------------
# classifier head / gradients
# ---------------------------------------------------------------------------


def test_classifier_dropout_only_in_training():
    torch.manual_seed(5)
    head = ClassifierHead(16, n_classes=4, dropout=0.5)
    x = torch.randn(8, 16)
    head.eval()
    assert torch.equal(head(x), head(x))
    head.train()
    # with p=0.5 on 8x16 activations two draws virtually never agree
    assert not torch.equal(head(x), head(x))


def test_triplet_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(6)
    emb = torch.randn(8, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    loss = batch_hard_triplet(emb, labels, margin=0.3)
    loss.backward()

    def value():
        return float(batch_hard_triplet(emb, labels, margin=0.3))

    numeric = fd_tensor_gradient(value, emb.data)
    assert_grads_close([emb.grad], [numeric], rtol=1e-3)


def test_smoothed_ce_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(7)
    logits = torch.randn(6, generator=gen, dtype=torch.float64, requires_grad=True)
    loss = smoothed_ce(logits, 2, 0.1, 6)
    loss.backward()

    def value():
        return float(smoothed_ce(logits, 2, 0.1, 6))

    numeric = fd_tensor_gradient(value, logits.data)
    assert_grads_close([logits.grad], [numeric], rtol=1e-3)
