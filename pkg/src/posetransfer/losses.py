"""Reconstruction, background and adversarial losses for both stages."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .pose import downsample


@dataclass
class LossWeights:
    lambda_bg1: float = 1.0
    lambda_d1: float = 1.0
    lambda_d2: float = 1.0
    lambda_l1_2: float = 10.0
    lambda_bg2: float = 10.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")

    def check_stage2(self) -> None:
        if self.lambda_d1 + self.lambda_d2 <= 0:
            raise ValueError("stage 2 needs lambda_d1 + lambda_d2 > 0")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "l1_loss")
    return (a - b).abs().mean()


def background_loss(y: torch.Tensor, y_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``|(y - y_hat) * mask|`` with the mask broadcast over channels.

    ``mask`` is ``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)``.
    """
    _same_shape(y, y_hat, "background_loss")
    if mask.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"background_loss: mask {tuple(mask.shape)} does not cover {tuple(y.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("background_loss: mask must be binary")
    m = mask.to(y.dtype)
    if m.dim() == y.dim() and m.shape[-3] != 1:
        raise ValueError(f"background_loss: mask {tuple(mask.shape)} must have one channel")
    return ((y - y_hat) * m).abs().mean()


def stage1_loss(y: torch.Tensor, y1_hat: torch.Tensor, mask: torch.Tensor,
                w: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Returns ``(total, {"l1": ..., "bg": ...})``."""
    l1 = l1_loss(y, y1_hat)
    bg = background_loss(y, y1_hat, mask)
    return l1 + w.lambda_bg1 * bg, {"l1": l1, "bg": bg}


def _finite(*logits: torch.Tensor) -> None:
    for t in logits:
        if not torch.all(torch.isfinite(t)):
            raise ValueError("non-finite discriminator logits")


def cgan_d_loss(logit_real: torch.Tensor, logit_fake: torch.Tensor,
                real_label: float = 1.0) -> torch.Tensor:
    """``-log s(real) - log(1 - s(fake))`` averaged over the batch, in logit space.

    ``real_label < 1`` gives one-sided label smoothing.
    """
    logit_real, logit_fake = torch.as_tensor(logit_real), torch.as_tensor(logit_fake)
    _finite(logit_real, logit_fake)
    if real_label == 1.0:
        real = F.softplus(-logit_real).mean()
    else:
        real = F.binary_cross_entropy_with_logits(
            logit_real, torch.full_like(logit_real, real_label))
    return real + F.softplus(logit_fake).mean()


def cgan_g_loss(logit_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss ``-log s(fake)``."""
    logit_fake = torch.as_tensor(logit_fake)
    _finite(logit_fake)
    return F.softplus(-logit_fake).mean()


class ScaleLogits(NamedTuple):
    real: torch.Tensor
    fake: torch.Tensor


def scale_logits(d1, d2, x: torch.Tensor, y: torch.Tensor,
                 y_hat: torch.Tensor) -> tuple[ScaleLogits, ScaleLogits]:
    """Discriminator logits at full resolution (D1) and after 2x downsampling (D2)."""
    full = ScaleLogits(d1(x, y), d1(x, y_hat))
    xd, yd, yhd = downsample(x, 2), downsample(y, 2), downsample(y_hat, 2)
    half = ScaleLogits(d2(xd, yd), d2(xd, yhd))
    return full, half


def multiscale_gan_objective(full: ScaleLogits, half: ScaleLogits, w: LossWeights,
                             real_label: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted two-scale adversarial terms as ``(generator term, discriminator term)``."""
    if full is None or half is None:
        raise ValueError("multiscale_gan_objective needs both scales")
    g = w.lambda_d1 * cgan_g_loss(full.fake) + w.lambda_d2 * cgan_g_loss(half.fake)
    d = (w.lambda_d1 * cgan_d_loss(full.real, full.fake, real_label)
         + w.lambda_d2 * cgan_d_loss(half.real, half.fake, real_label))
    return g, d


def stage2_loss(full: ScaleLogits, half: ScaleLogits, y: torch.Tensor, y_hat: torch.Tensor,
                mask: torch.Tensor, w: LossWeights, real_label: float = 1.0):
    """Returns ``(g_total, d_total, components)``.

    ``y_hat`` is the merged image; the logits must come from it.  Callers
    detach ``y_hat`` before computing logits for the discriminator step.
    """
    g_adv, d_adv = multiscale_gan_objective(full, half, w, real_label)
    l1 = l1_loss(y, y_hat)
    bg = background_loss(y, y_hat, mask)
    g_total = g_adv + w.lambda_l1_2 * l1 + w.lambda_bg2 * bg
    return g_total, d_adv, {"g_adv": g_adv, "d_adv": d_adv, "l1": l1, "bg": bg}
