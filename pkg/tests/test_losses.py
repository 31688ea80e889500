import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posetransfer.losses import (
    LossWeights, ScaleLogits, background_loss, cgan_d_loss, cgan_g_loss, l1_loss,
    multiscale_gan_objective, stage1_loss, stage2_loss,
)


def _softplus(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def _images(seed, b=2, c=3, h=6, w=4):
    g = torch.Generator().manual_seed(seed)
    y = torch.rand(b, c, h, w, generator=g, dtype=torch.float64) * 2 - 1
    yh = torch.rand(b, c, h, w, generator=g, dtype=torch.float64) * 2 - 1
    mask = (torch.rand(b, 1, h, w, generator=g) < 0.4).double()
    return y, yh, mask


def test_l1_matches_elementwise_sum():
    y, yh, _ = _images(0)
    oracle = sum(abs(a - b) for a, b in zip(y.flatten().tolist(), yh.flatten().tolist())) / y.numel()
    assert l1_loss(y, yh).item() == pytest.approx(oracle, abs=1e-12)


def test_background_loss_matches_masked_sum():
    y, yh, m = _images(1)
    b, c, h, w = y.shape
    total = 0.0
    for i in range(b):
        for k in range(c):
            for r in range(h):
                for s in range(w):
                    total += abs(y[i, k, r, s].item() - yh[i, k, r, s].item()) * m[i, 0, r, s].item()
    assert background_loss(y, yh, m).item() == pytest.approx(total / y.numel(), abs=1e-12)


def test_background_loss_small_example():
    y = torch.tensor([[[1.0, 0.0], [0.5, -1.0]]])
    yh = torch.zeros_like(y)
    mask = torch.tensor([[1, 0], [1, 0]])
    assert background_loss(y, yh, mask).item() == pytest.approx((1.0 + 0.5) / 4)


def test_background_loss_ignores_unmasked_pixels():
    y, yh, m = _images(2)
    changed = yh + (1 - m) * 5.0
    assert background_loss(y, changed, m).item() == pytest.approx(background_loss(y, yh, m).item(), abs=1e-12)


def test_background_loss_rejects_soft_mask():
    y, yh, m = _images(3)
    with pytest.raises(ValueError):
        background_loss(y, yh, m * 0.5)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 2))


def test_stage1_total_examples():
    y, yh, m = _images(4)
    total, parts = stage1_loss(y, yh, m, LossWeights())
    assert total.item() == pytest.approx(parts["l1"].item() + parts["bg"].item(), abs=1e-12)
    zero_bg, parts0 = stage1_loss(y, yh, m, LossWeights(lambda_bg1=0))
    assert zero_bg.item() == parts0["l1"].item()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), lo=st.floats(0, 5), hi=st.floats(0, 5))
def test_stage1_monotone_in_bg_weight(seed, lo, hi):
    lo, hi = sorted((lo, hi))
    y, yh, m = _images(seed)
    a, _ = stage1_loss(y, yh, m, LossWeights(lambda_bg1=lo))
    b, _ = stage1_loss(y, yh, m, LossWeights(lambda_bg1=hi))
    assert a.item() <= b.item() + 1e-12


def test_d_loss_at_zero_logits():
    z = torch.zeros(4)
    assert cgan_d_loss(z, z).item() == pytest.approx(2 * math.log(2))
    assert cgan_g_loss(z).item() == pytest.approx(math.log(2))


def test_gan_losses_match_log_sigmoid_oracle():
    real = torch.tensor([2.0, -0.5, 30.0], dtype=torch.float64)
    fake = torch.tensor([-1.0, 0.3, -40.0], dtype=torch.float64)
    d_oracle = (sum(_softplus(-r) for r in real.tolist()) + sum(_softplus(f) for f in fake.tolist())) / 3
    g_oracle = sum(_softplus(-f) for f in fake.tolist()) / 3
    assert cgan_d_loss(real, fake).item() == pytest.approx(d_oracle, abs=1e-12)
    assert cgan_g_loss(fake).item() == pytest.approx(g_oracle, abs=1e-12)


def test_gan_losses_finite_for_extreme_logits():
    big = torch.tensor([1e4, -1e4])
    assert torch.isfinite(cgan_d_loss(big, -big))
    assert torch.isfinite(cgan_g_loss(big))


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        cgan_g_loss(torch.tensor([float("nan")]))


def test_label_smoothing():
    real = torch.tensor([1.5], dtype=torch.float64)
    fake = torch.tensor([-0.5], dtype=torch.float64)
    t = 0.9
    oracle = -(t * math.log(1 / (1 + math.exp(-1.5))) + (1 - t) * math.log(1 - 1 / (1 + math.exp(-1.5))))
    oracle += _softplus(-0.5)
    assert cgan_d_loss(real, fake, real_label=t).item() == pytest.approx(oracle, abs=1e-12)


def _logits(seed):
    g = torch.Generator().manual_seed(seed)
    r = lambda: torch.randn(3, generator=g, dtype=torch.float64)
    return ScaleLogits(r(), r()), ScaleLogits(r(), r())


def test_multiscale_objective_weighted_sum():
    full, half = _logits(0)
    w = LossWeights(lambda_d1=0.7, lambda_d2=2.5)
    g, d = multiscale_gan_objective(full, half, w)
    assert g.item() == pytest.approx(0.7 * cgan_g_loss(full.fake).item() + 2.5 * cgan_g_loss(half.fake).item(),
                                     abs=1e-12)
    assert d.item() == pytest.approx(0.7 * cgan_d_loss(*full).item() + 2.5 * cgan_d_loss(*half).item(),
                                     abs=1e-12)


def test_multiscale_objective_requires_both_scales():
    full, _ = _logits(1)
    with pytest.raises(ValueError):
        multiscale_gan_objective(full, None, LossWeights())


def test_zeroing_half_scale_gives_plain_cgan():
    full, half = _logits(2)
    g, d = multiscale_gan_objective(full, half, LossWeights(lambda_d2=0))
    assert g.item() == cgan_g_loss(full.fake).item()
    assert d.item() == cgan_d_loss(*full).item()


def test_stage2_total_decomposes():
    full, half = _logits(3)
    y, yh, m = _images(5)
    w = LossWeights(lambda_l1_2=4.0, lambda_bg2=3.0)
    g_total, d_total, c = stage2_loss(full, half, y, yh, m, w)
    expect = c["g_adv"].item() + 4.0 * l1_loss(y, yh).item() + 3.0 * background_loss(y, yh, m).item()
    assert g_total.item() == pytest.approx(expect, abs=1e-12)
    assert d_total.item() == c["d_adv"].item()


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_l1_2=-1)
    with pytest.raises(ValueError):
        LossWeights(lambda_d1=0, lambda_d2=0).check_stage2()
