"""Training objectives: reconstruction, least-squares adversarial pair,
feature matching, and the composite bundle used for logging.

Score/feature arguments are sequences with one entry per sub-discriminator;
aggregation across sub-discriminators is an arithmetic mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NonFiniteLoss, ShapeMismatch


def _as_list(x):
    if isinstance(x, torch.Tensor):
        return [x]
    return list(x)


def recon_loss(ema_hat: torch.Tensor, ema: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    if ema_hat.shape != ema.shape:
        raise ShapeMismatch(f"{tuple(ema_hat.shape)} vs {tuple(ema.shape)}")
    return torch.mean((ema - ema_hat) ** 2)


def adv_d_loss(scores_real, scores_fake) -> torch.Tensor:
    """Least-squares critic objective: real scores toward 1, fake toward 0."""
    scores_real = _as_list(scores_real)
    scores_fake = _as_list(scores_fake)
    if len(scores_real) != len(scores_fake):
        raise ShapeMismatch("real/fake score lists differ in length")
    terms = [((r - 1.0) ** 2).mean() + (f ** 2).mean()
             for r, f in zip(scores_real, scores_fake)]
    return torch.stack(terms).mean()


def adv_g_loss(scores_fake) -> torch.Tensor:
    """Least-squares deception objective: fake scores pushed toward 1."""
    terms = [((f - 1.0) ** 2).mean() for f in _as_list(scores_fake)]
    return torch.stack(terms).mean()


def feature_matching_loss(fmaps_real, fmaps_fake) -> torch.Tensor:
    """Per-layer mean L1 distance between critic activations, summed over
    layers and averaged over sub-discriminators.

    The real branch is treated as a constant target (no gradient through it).
    """
    if len(fmaps_real) != len(fmaps_fake):
        raise ShapeMismatch("real/fake feature lists differ in sub-discriminator count")
    per_sub = []
    for real_layers, fake_layers in zip(fmaps_real, fmaps_fake):
        if len(real_layers) != len(fake_layers):
            raise ShapeMismatch("layer counts differ between real and fake branches")
        total = 0.0
        for r, f in zip(real_layers, fake_layers):
            if r.shape != f.shape:
                raise ShapeMismatch(f"feature map shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
            total = total + (r.detach() - f).abs().mean()
        per_sub.append(total)
    return torch.stack(per_sub).mean()


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    adv_g: float = 1.0
    adv_d: float = 1.0
    fm: float = 1.0


@dataclass(frozen=True)
class LossBundle:
    """One step's scalar objectives, weighted composites included."""

    recon: float
    adv_g: float
    adv_d: float
    fm: float
    inverter_total: float
    discriminator_total: float
    total: float


def compose(recon, adv_g, adv_d, fm, weights: LossWeights = LossWeights()) -> LossBundle:
    """Combine raw terms into the inverter/discriminator/total composites.

    Raises NonFiniteLoss naming the first offending term.
    """
    raw = {"recon": float(recon), "adv_g": float(adv_g), "adv_d": float(adv_d),
           "fm": float(fm)}
    for name, value in raw.items():
        if not torch.isfinite(torch.tensor(value)):
            raise NonFiniteLoss(f"{name} is {value}")
    inverter_total = (weights.adv_g * raw["adv_g"] + weights.recon * raw["recon"]
                      + weights.fm * raw["fm"])
    discriminator_total = weights.adv_d * raw["adv_d"]
    return LossBundle(
        recon=raw["recon"],
        adv_g=raw["adv_g"],
        adv_d=raw["adv_d"],
        fm=raw["fm"],
        inverter_total=inverter_total,
        discriminator_total=discriminator_total,
        total=inverter_total + discriminator_total,
    )
