import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fcdgan import losses as L
from fcdgan.losses import LossWeights
from fcdgan.networks import Discriminator, Generator, Segmentor

from oracles import bce_ref, generation_loss_ref, sparsity_ref, suppression_ref


def rand(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=dtype)


def randn(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


# -- elementary terms --------------------------------------------------------

def test_generation_loss_perfect_prediction_is_zero():
    y = randn(2, 4, 8, 8)
    assert L.generation_loss(y.clone(), y, torch.zeros(2, 8, 8)).item() == 0.0


def test_generation_loss_fully_masked_is_zero():
    gen, y = randn(1, 4, 8, 8, seed=1), randn(1, 4, 8, 8, seed=2)
    val = L.generation_loss(gen, y, torch.ones(1, 8, 8))
    assert val.item() == 0.0 and math.isfinite(val.item())


def test_generation_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        L.generation_loss(randn(1, 4, 8, 8), randn(1, 3, 8, 8), torch.zeros(1, 8, 8))
    with pytest.raises(ValueError):
        L.generation_loss(randn(1, 4, 8, 8), randn(1, 4, 8, 8), torch.zeros(1, 7, 8))


def test_generation_loss_needs_extractor_for_content_term():
    with pytest.raises(ValueError):
        L.generation_loss(randn(1, 4, 8, 8), randn(1, 4, 8, 8), torch.zeros(1, 8, 8), mu=0.5)


@pytest.mark.parametrize("seed", range(5))
def test_generation_loss_matches_double_loop(seed):
    gen, y, m = randn(1, 4, 8, 8, seed=seed), randn(1, 4, 8, 8, seed=seed + 100), rand(1, 8, 8, seed=seed + 200)
    ref = generation_loss_ref(gen[0].tolist(), y[0].tolist(), m[0].tolist())
    assert L.generation_loss(gen, y, m).item() == pytest.approx(ref, rel=1e-5)


def test_generation_loss_batch_is_mean_of_samples():
    gen, y, m = randn(3, 4, 8, 8), randn(3, 4, 8, 8, seed=1), rand(3, 8, 8, seed=2)
    each = [L.generation_loss(gen[i : i + 1], y[i : i + 1], m[i : i + 1]).item() for i in range(3)]
    assert L.generation_loss(gen, y, m).item() == pytest.approx(np.mean(each), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generation_loss_pixel_permutation_invariant(seed):
    gen, y, m = randn(1, 4, 8, 8, seed=seed), randn(1, 4, 8, 8, seed=seed + 1), rand(1, 8, 8, seed=seed + 2)
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(seed))
    p = lambda t: t.reshape(*t.shape[:-2], 64)[..., perm].reshape(t.shape)  # noqa: E731
    assert L.generation_loss(p(gen), p(y), p(m)).item() == pytest.approx(L.generation_loss(gen, y, m).item(), rel=1e-12)


def test_sparsity_examples():
    assert L.sparsity_l1(torch.zeros(1, 8, 8)).item() == 0
    assert L.sparsity_l1(torch.ones(1, 8, 8)).item() == 1
    half = torch.zeros(1, 8, 8)
    half[:, :4] = 1
    assert L.sparsity_l1(half).item() == 0.5


def test_suppression_examples():
    assert L.suppression_l2(torch.zeros(1, 8, 8)).item() == 0
    assert L.suppression_l2(torch.ones(1, 8, 8), torch.ones(1, 8, 8)).item() == 1
    support = torch.zeros(1, 8, 8, dtype=torch.float64)
    support[:, :, :4] = 1
    val = L.suppression_l2(torch.full((1, 8, 8), 0.5, dtype=torch.float64), support)
    assert val.item() == pytest.approx(0.125, abs=1e-15)
    with pytest.raises(ValueError):
        L.suppression_l2(torch.zeros(1, 8, 8), torch.zeros(1, 4, 8))


def test_masked_pair_examples():
    x, y = randn(1, 4, 6, 6), randn(1, 4, 6, 6, seed=1)
    xm, ym = L.masked_pair(x, y, torch.zeros(1, 6, 6))
    assert torch.equal(xm, x) and torch.equal(ym, y)
    xm, ym = L.masked_pair(x, y, torch.ones(1, 6, 6))
    assert not xm.any() and not ym.any()
    m = torch.zeros(1, 6, 6)
    m[0, 2, 3] = 1
    xm, ym = L.masked_pair(x, y, m)
    zeroed = (xm == 0).all(dim=1)[0]
    assert zeroed[2, 3] and zeroed.sum() == 1
    assert torch.equal(xm[..., 0, :], x[..., 0, :])
    with pytest.raises(ValueError):
        L.masked_pair(x, y[..., :5], m)


def test_fscd_loss_examples():
    ref = (rand(1, 16, 16) > 0.5).double()
    assert L.fscd_loss(ref.clone(), ref).item() < 1e-6
    assert L.fscd_loss(torch.full((1, 16, 16), 0.5, dtype=torch.float64), ref).item() == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        L.fscd_loss(ref, ref * 0.5 + 0.25)


def test_fscd_loss_matches_double_loop():
    prob, ref = rand(1, 16, 16, seed=3), (rand(1, 16, 16, seed=4) > 0.5).double()
    assert L.fscd_loss(prob, ref).item() == pytest.approx(bce_ref(prob[0].tolist(), ref[0].tolist()), rel=1e-6)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_l1=-0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_losses_finite_for_finite_input(seed, scale):
    gen, y = randn(1, 4, 8, 8, seed=seed) * scale, randn(1, 4, 8, 8, seed=seed + 1) * scale
    m = rand(1, 8, 8, seed=seed + 2)
    m[0, 0] = 1.0
    for v in (L.generation_loss(gen, y, m), L.generation_loss(gen, y, torch.ones_like(m)),
              L.sparsity_l1(m), L.suppression_l2(m, 1 - m), L.fscd_loss(m, (m > 0.5).double()),
              L.fscd_loss(torch.zeros_like(m), torch.ones_like(m))):
        assert math.isfinite(v.item())


# -- objectives ---------------------------------------------------------------

@pytest.fixture
def small_nets():
    torch.manual_seed(0)
    seg = Segmentor(4, (4, 8)).double()
    gen = Generator(4, 8, 1).double()
    disc = Discriminator(4, (4, 8)).double()
    return seg, gen, disc


def test_uscd_zero_when_perfect_generator_and_no_sparsity():
    y = randn(2, 4, 8, 8)
    total, _ = L.uscd_loss(y.clone(), y, rand(2, 8, 8), LossWeights(lambda_l1=0.0, mu_content=0.0))
    assert total.item() == 0.0


def test_uscd_sparsity_gradient_at_zero_mask():
    lam = 1e4
    y, gen = randn(1, 4, 8, 8), randn(1, 4, 8, 8, seed=1)
    mask = torch.zeros(1, 8, 8, dtype=torch.float64, requires_grad=True)
    _, terms = L.uscd_loss(gen, y, mask, LossWeights(lambda_l1=lam))
    (lam * terms["l1"]).backward()
    # forward difference oracle (mask cannot go below 0)
    h = 1e-6
    probe = torch.zeros(1, 8, 8, dtype=torch.float64)
    probe[0, 3, 5] = h
    fd = lam * (L.sparsity_l1(probe) - L.sparsity_l1(torch.zeros_like(probe))).item() / h
    assert fd == pytest.approx(lam / 64, rel=1e-9)
    assert torch.allclose(mask.grad, torch.full_like(mask, lam / 64), rtol=1e-12)


def test_uscd_objective_runs_through_networks(small_nets):
    seg, gen, _ = small_nets
    x, y = randn(2, 4, 16, 16), randn(2, 4, 16, 16, seed=1)
    val = L.uscd_objective(x, y, seg, gen, LossWeights(lambda_l1=0.75))
    val.backward()
    assert all(p.grad is not None for p in seg.parameters())
    assert all(p.grad is not None for p in gen.parameters())


def test_wscd_l2_term_zero_when_unchanged_mask_is_zero(small_nets):
    _, _, disc = small_nets
    xc, yc = randn(2, 4, 8, 8), randn(2, 4, 8, 8, seed=1)
    _, terms = L.wscd_segmentor_loss(disc, xc, yc, rand(2, 1, 8, 8), torch.zeros(2, 1, 8, 8, dtype=torch.float64),
                                     LossWeights(1.6, 1.5, 0.0))
    assert terms["l2"].item() == 0.0


def test_wscd_discriminator_constant_half_gives_one():
    class Half(torch.nn.Module):
        def forward(self, a, b):
            return torch.full((a.shape[0],), 0.5, dtype=a.dtype)

    x = randn(2, 4, 8, 8)
    total, _ = L.wscd_discriminator_loss(Half(), x, x, x, x, rand(2, 1, 8, 8))
    assert total.item() == 1.0


def test_wscd_discriminator_full_mask_gives_exactly_one(small_nets):
    _, _, disc = small_nets
    xc, yc, xu, yu = (randn(2, 4, 8, 8, seed=s) for s in range(4))
    total, _ = L.wscd_discriminator_loss(disc, xc, yc, xu, yu, torch.ones(2, 1, 8, 8, dtype=torch.float64))
    assert total.item() == 1.0


def test_rscd_all_ones_region_collapses_l2(small_nets):
    _, _, disc = small_nets
    x, y = randn(1, 4, 8, 8), randn(1, 4, 8, 8, seed=1)
    _, terms = L.rscd_segmentor_loss(disc, x, y, torch.ones(1, 8, 8, dtype=torch.float64), rand(1, 8, 8),
                                     LossWeights(0.02, 2.0, 0.0))
    assert terms["l2"].item() == 0.0


def test_rscd_mask_outside_region(small_nets):
    _, _, disc = small_nets
    x, y = randn(1, 4, 8, 8), randn(1, 4, 8, 8, seed=1)
    region = torch.zeros(1, 8, 8, dtype=torch.float64)
    region[:, :4, :4] = 1
    mask = torch.zeros(1, 8, 8, dtype=torch.float64)
    mask[:, 5:, 5:] = 0.8
    _, terms = L.rscd_segmentor_loss(disc, x, y, region, mask, LossWeights(0.02, 2.0, 0.0))
    assert terms["l1"].item() == 0.0
    assert terms["l2"].item() == pytest.approx(9 * 0.64 / 64)


def test_rscd_objectives_region_shape_checked(small_nets):
    seg, gen, disc = small_nets
    x, y = randn(1, 4, 8, 8), randn(1, 4, 8, 8, seed=1)
    with pytest.raises(ValueError):
        L.rscd_objectives(x, y, torch.zeros(1, 8, 7, dtype=torch.float64), seg, disc, gen, LossWeights(0.02, 2, 0.5))


def test_gradient_isolation(small_nets):
    seg, gen, disc = small_nets
    changed = (randn(2, 4, 16, 16), randn(2, 4, 16, 16, seed=1))
    unchanged = (randn(2, 4, 16, 16, seed=2), randn(2, 4, 16, 16, seed=3))
    w = LossWeights(1.6, 1.5, 0.2)

    L.wscd_discriminator_objective(changed, unchanged, seg, disc).backward()
    assert all(p.grad is None for p in seg.parameters())
    assert any(p.grad is not None for p in disc.parameters())
    disc.zero_grad(set_to_none=True)

    L.wscd_segmentor_objective(changed, unchanged, seg, disc, gen, w).backward()
    assert all(p.grad is None for p in disc.parameters())
    assert all(p.grad is None for p in gen.parameters())
    assert any(p.grad is not None for p in seg.parameters())
    assert all(p.requires_grad for p in disc.parameters())  # restored after freezing
    seg.zero_grad(set_to_none=True)

    region = torch.zeros(2, 16, 16, dtype=torch.float64)
    region[:, 4:10, 4:10] = 1
    s_loss, d_loss = L.rscd_objectives(*changed, region, seg, disc, gen, w)
    d_loss.backward()
    assert all(p.grad is None for p in seg.parameters())
    s_loss.backward()
    assert any(p.grad is not None for p in seg.parameters())
    disc_grads = [p.grad.clone() for p in disc.parameters()]
    s_loss2, _ = L.rscd_objectives(*changed, region, seg, disc, gen, w)
    s_loss2.backward()
    assert all(torch.equal(a, p.grad) for a, p in zip(disc_grads, disc.parameters()))
