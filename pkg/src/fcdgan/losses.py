"""Loss terms and the per-regime objectives.

Tensors follow torch layout: rasters are ``(B, C, H, W)`` and masks are
``(B, 1, H, W)`` or ``(B, H, W)``. Reductions are per sample first, then a
mean over the batch, so a batch of one is the single-image formula.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch
import torch.nn as nn

EPS = 1e-8
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the objective terms.

    ``lambda_l1`` is the sparsity weight (plain USCD lambda, or lambda_1),
    ``lambda_l2`` the suppression weight, ``lambda_gen`` the generation-loss
    weight and ``mu_content`` the content-loss weight inside the generation
    loss. ``disc_weight`` scales the discrimination term of the segmentor
    objective; 1 everywhere except the generation-only ablation.
    """

    lambda_l1: float = 0.75
    lambda_l2: float = 0.0
    lambda_gen: float = 1.0
    mu_content: float = 0.0
    disc_weight: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _as_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Return ``mask`` as (B, 1, H, W) matching the spatial shape of ``like``."""
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"mask must be (B, H, W) or (B, 1, H, W), got {tuple(mask.shape)}")
    if mask.shape[0] != like.shape[0] or mask.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match raster {tuple(like.shape)}")
    return mask


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Disable parameter gradients so a forward pass only differentiates inputs."""
    saved = [(p, p.requires_grad) for m in modules if m is not None for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


# -- elementary terms -------------------------------------------------------

def masked_pair(x: torch.Tensor, y: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero out masked pixels in both rasters: ``(x * (1 - m), y * (1 - m))``."""
    _same_shape(x, y, "masked_pair")
    keep = 1 - _as_mask(mask, x)
    return x * keep, y * keep


def sparsity_l1(mask: torch.Tensor) -> torch.Tensor:
    """Mean mask value. Masks lie in [0, 1], so this is the l1 norm over N;
    using the plain mean keeps the derivative at 1/N on an all-zero mask,
    where ``abs`` would report 0."""
    return mask.mean()


def suppression_l2(mask: torch.Tensor, support: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``(mask * support)**2`` over all pixels; whole image without support."""
    if support is not None:
        if support.shape != mask.shape:
            raise ValueError(f"support shape {tuple(support.shape)} does not match mask {tuple(mask.shape)}")
        mask = mask * support
    return (mask * mask).mean()


def content_loss(gen: torch.Tensor, y: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Band-averaged feature MSE; each band is replicated to 3 channels."""
    b, c, h, w = gen.shape
    fg = extractor(gen.reshape(b * c, 1, h, w).expand(-1, 3, -1, -1))
    fy = extractor(y.reshape(b * c, 1, h, w).expand(-1, 3, -1, -1))
    # equal feature sizes per band, so the global mean is the mean of band MSEs
    return ((fg - fy) ** 2).mean()


def reconstruction_loss(gen: torch.Tensor, y: torch.Tensor, mask: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Unmasked-pixel mean of the band-averaged absolute error, averaged over the batch."""
    _same_shape(gen, y, "generation_loss")
    keep = 1 - _as_mask(mask, gen)[:, 0]
    err = (gen - y).abs().mean(dim=1)
    per_sample = (keep * err).sum(dim=(1, 2)) / (keep.sum(dim=(1, 2)) + eps)
    return per_sample.mean()


def generation_loss(
    gen: torch.Tensor,
    y: torch.Tensor,
    mask: torch.Tensor,
    mu: float = 0.0,
    extractor: nn.Module | None = None,
) -> torch.Tensor:
    """Masked reconstruction error plus ``mu`` times the masked content loss."""
    loss = reconstruction_loss(gen, y, mask)
    if mu > 0:
        if extractor is None:
            raise ValueError("mu > 0 requires a content feature extractor")
        gm, ym = masked_pair(gen, y, mask)
        loss = loss + mu * content_loss(gm, ym, extractor)
    return loss


def fscd_loss(prob: torch.Tensor, ref: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Mean binary cross-entropy against a {0, 1} reference."""
    if prob.shape != ref.shape:
        raise ValueError(f"fscd_loss: shape mismatch {tuple(prob.shape)} vs {tuple(ref.shape)}")
    if not bool(((ref == 0) | (ref == 1)).all()):
        raise ValueError("fscd_loss: reference must contain only 0 and 1")
    p = prob.clamp(clamp, 1 - clamp)
    return -(ref * torch.log(p) + (1 - ref) * torch.log(1 - p)).mean()


# -- mask-level objectives --------------------------------------------------
#
# These take already computed masks, so they are shared between the trainers
# (which reuse one segmentor forward for both adversarial steps) and the
# network-level wrappers below. Each returns (total, {term: value}).

def uscd_loss(gen, y, mask, weights: LossWeights, extractor=None):
    lg = generation_loss(gen, y, mask, weights.mu_content, extractor)
    l1 = sparsity_l1(mask)
    total = lg + weights.lambda_l1 * l1
    return total, {"generation": lg, "l1": l1, "total": total}


def wscd_segmentor_loss(
    discriminator, xc, yc, mask_c, mask_u, weights: LossWeights, gen_c=None, extractor=None
):
    """Segmentor side of the weakly supervised game.

    ``mask_c`` is the segmentor output on the changed pairs and ``mask_u`` on
    the unchanged pairs. ``gen_c`` is the (frozen) generator prediction of
    ``yc``; required only when ``lambda_gen > 0``.
    """
    with frozen(discriminator):
        ldc = discriminator(*masked_pair(xc, yc, mask_c)).mean()
    l1 = sparsity_l1(mask_c)
    l2 = suppression_l2(mask_u)
    total = weights.disc_weight * ldc + weights.lambda_l1 * l1 + weights.lambda_l2 * l2
    terms = {"ldc": ldc, "l1": l1, "l2": l2}
    if weights.lambda_gen > 0:
        if gen_c is None:
            raise ValueError("lambda_gen > 0 requires the generator prediction")
        lg = generation_loss(gen_c, yc, mask_c, weights.mu_content, extractor)
        total = total + weights.lambda_gen * lg
        terms["generation"] = lg
    terms["total"] = total
    return total, terms


def wscd_discriminator_loss(discriminator, xc, yc, xu, yu, mask_c):
    """``1 - d(masked changed) + d(masked unchanged)`` with the changed-pair mask on both."""
    m = mask_c.detach()
    ldc = discriminator(*masked_pair(xc, yc, m)).mean()
    ldu = discriminator(*masked_pair(xu, yu, m)).mean()
    total = 1 - ldc + ldu
    return total, {"ldc": ldc, "ldu": ldu, "total": total}


def rscd_segmentor_loss(discriminator, x, y, region, mask, weights: LossWeights, gen=None, extractor=None):
    region = _as_mask(region, x)
    mask = _as_mask(mask, x)
    with frozen(discriminator):
        ldc = discriminator(*masked_pair(x, y, mask)).mean()
    l1 = sparsity_l1(mask * region)
    l2 = suppression_l2(mask, 1 - region)
    total = weights.disc_weight * ldc + weights.lambda_l1 * l1 + weights.lambda_l2 * l2
    terms = {"ldc": ldc, "l1": l1, "l2": l2}
    if weights.lambda_gen > 0:
        if gen is None:
            raise ValueError("lambda_gen > 0 requires the generator prediction")
        lg = generation_loss(gen, y, mask, weights.mu_content, extractor)
        total = total + weights.lambda_gen * lg
        terms["generation"] = lg
    terms["total"] = total
    return total, terms


def rscd_discriminator_loss(discriminator, x, y, y_sim, mask):
    """``1 - d(x, y) + d(x, y_sim)``, both pairs masked by the detached segmentation."""
    m = mask.detach()
    ldc = discriminator(*masked_pair(x, y, m)).mean()
    ldu = discriminator(*masked_pair(x, y_sim, m)).mean()
    total = 1 - ldc + ldu
    return total, {"ldc": ldc, "ldu": ldu, "total": total}


# -- network-level objectives ----------------------------------------------

def uscd_objective(x, y, segmentor, generator, weights: LossWeights, extractor=None) -> torch.Tensor:
    """Masked generation loss plus weighted sparsity, differentiable in both networks."""
    return uscd_loss(generator(x), y, segmentor(x, y), weights, extractor)[0]


def wscd_segmentor_objective(changed, unchanged, segmentor, discriminator, generator, weights: LossWeights, extractor=None):
    """``changed`` and ``unchanged`` are ``(x, y)`` batches of equal size."""
    xc, yc = changed
    xu, yu = unchanged
    mask_c = segmentor(xc, yc)
    mask_u = segmentor(xu, yu)
    gen_c = None
    if weights.lambda_gen > 0:
        with torch.no_grad():
            gen_c = generator(xc)
    return wscd_segmentor_loss(discriminator, xc, yc, mask_c, mask_u, weights, gen_c, extractor)[0]


def wscd_discriminator_objective(changed, unchanged, segmentor, discriminator) -> torch.Tensor:
    xc, yc = changed
    xu, yu = unchanged
    with torch.no_grad():
        mask_c = segmentor(xc, yc)
    return wscd_discriminator_loss(discriminator, xc, yc, xu, yu, mask_c)[0]


def rscd_objectives(x, y, region, segmentor, discriminator, generator, weights: LossWeights, extractor=None):
    """Return ``(segmentor_loss, discriminator_loss)`` for one batch with region references."""
    from .data import simulate_unchanged

    region = _as_mask(region, x)
    mask = segmentor(x, y)
    gen = None
    if weights.lambda_gen > 0:
        with torch.no_grad():
            gen = generator(x)
    seg_loss, _ = rscd_segmentor_loss(discriminator, x, y, region, mask, weights, gen, extractor)
    y_sim = simulate_unchanged(x, y, region)
    disc_loss, _ = rscd_discriminator_loss(discriminator, x, y, y_sim, mask)
    return seg_loss, disc_loss
