"""Loss terms and their weighted composition. All functions are pure and differentiable."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor

from .factor_model import NumericFailure

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    kl: float = 0.01
    segm: float = 10.0
    adv: float = 10.0
    rec: float = 1.0
    z_rec: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    kl: float = 0.0
    segm: float = 0.0
    adv_gen: float = 0.0
    adv_disc: float = 0.0
    rec: float = 0.0
    z_rec: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("step", "kl", "segm", "adv_gen", "adv_disc", "rec", "z_rec", "total")

    def row(self, step: int) -> list[str]:
        # repr round-trips floats exactly, so identical runs give identical files
        return [str(step)] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS[1:]]


def write_loss_csv(path, reports) -> None:
    """``reports`` is an iterable of ``(step, LossReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LossReport.CSV_FIELDS)
        for step, rep in reports:
            w.writerow(rep.row(step))


def kl_loss(mean: Tensor, log_variance: Tensor) -> Tensor:
    """KL divergence of a diagonal Gaussian from N(0, I), summed over dims, averaged over the batch."""
    if not (torch.isfinite(mean).all() and torch.isfinite(log_variance).all()):
        raise NumericFailure("non-finite posterior passed to kl_loss")
    per = 0.5 * (mean.pow(2) + log_variance.exp() - log_variance - 1.0)
    return per.reshape(per.shape[0], -1).sum(dim=1).mean()


def dice_loss(gt: Tensor, pred: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss over foreground channels; sums over (L, H, W), mean over the batch."""
    if gt.shape != pred.shape:
        raise ValueError(f"dice_loss shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    dims = tuple(range(1, gt.dim()))
    inter = (gt * pred).sum(dim=dims)
    total = gt.sum(dim=dims) + pred.sum(dim=dims)
    return (1.0 - 2.0 * (inter + eps) / (total + eps)).mean()


def adversarial_losses(score_fake: Tensor, score_real: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN losses ``(generator, discriminator)``.

    The discriminator pushes real scores to 1 and fake scores to 0; the generator
    pushes fake scores to 1.
    """
    disc = (score_fake.pow(2)).mean() + (score_real - 1.0).pow(2).mean()
    gen = (score_fake - 1.0).pow(2).mean()
    return gen, disc


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"reconstruction shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def z_reconstruction_loss(z_sampled: Tensor, z_reencoded: Tensor) -> Tensor:
    return (z_sampled - z_reencoded).abs().mean()


def total_loss(report, weights: LossWeights, has_labels: bool = True):
    """Weighted generator objective. ``report`` may hold tensors or floats.

    Without labels the segmentation term is dropped.
    """
    get = (lambda k: report[k]) if isinstance(report, dict) else (lambda k: getattr(report, k))
    out = (
        weights.kl * get("kl")
        + weights.adv * get("adv_gen")
        + weights.rec * get("rec")
        + weights.z_rec * get("z_rec")
    )
    if has_labels:
        out = out + weights.segm * get("segm")
    return out


def weights_from_dict(values: dict) -> LossWeights:
    known = {f.name for f in fields(LossWeights)}
    return LossWeights(**{k: float(v) for k, v in values.items() if k in known})


def weights_to_dict(w: LossWeights) -> dict:
    return asdict(w)
