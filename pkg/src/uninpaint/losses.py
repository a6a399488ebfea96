"""Adversarial and latent-reconstruction losses.

The discriminator separates real observations from simulated measurements of
reconstructions.  Two auxiliary terms tie the generator to its latent input:
recovering the sampled latent from the simulated measurement (``z`` loss),
and a cycle that re-encodes an observation, regenerates, re-measures and
matches the original observation (``y`` loss, MSE + adversarial).  The total
generator-side objective is

    total = g_adv + lambda_z * z_rec + lambda_y * (y_rec_mse + y_rec_adv)

All functions are pure and batch-reducing; they accept torch tensors and
return scalars that stay on the autograd tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

HINGE = "hinge"
LOGISTIC = "logistic"
LEAST_SQUARES = "least_squares"
ADV_FORMS = (HINGE, LOGISTIC, LEAST_SQUARES)


@dataclass(frozen=True)
class LossWeights:
    """Objective mix.  Defaults are tuned for the toy protocol, not copied
    from any reference result; expose them in every config surface."""

    lambda_z: float = 1.0
    lambda_y: float = 10.0
    adv_form: str = HINGE

    def __post_init__(self):
        if self.lambda_z < 0 or self.lambda_y < 0:
            raise ValueError("loss weights must be non-negative")
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}")

    def to_json(self) -> dict:
        return {"lambda_z": self.lambda_z, "lambda_y": self.lambda_y,
                "adv_form": self.adv_form}

    @classmethod
    def from_json(cls, obj: dict) -> "LossWeights":
        return cls(lambda_z=float(obj["lambda_z"]), lambda_y=float(obj["lambda_y"]),
                   adv_form=obj["adv_form"])


@dataclass
class LossReport:
    """Per-update scalar summary, one JSON-lines row per optimizer update."""

    d_loss: float = 0.0
    g_adv: float = 0.0
    z_rec: float = 0.0
    y_rec_mse: float = 0.0
    y_rec_adv: float = 0.0
    total: float = 0.0

    def to_json(self) -> dict:
        return {"d_loss": self.d_loss, "g_adv": self.g_adv, "z_rec": self.z_rec,
                "y_rec_mse": self.y_rec_mse, "y_rec_adv": self.y_rec_adv,
                "total": self.total}

    def all_finite(self) -> bool:
        import math
        return all(math.isfinite(v) for v in self.to_json().values())


def _check_form(form: str) -> None:
    if form not in ADV_FORMS:
        raise ValueError(f"unknown adversarial form {form!r}")


def d_adv_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor,
               form: str = HINGE) -> torch.Tensor:
    """Discriminator-side adversarial loss (to be minimized)."""
    _check_form(form)
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("score vectors must be non-empty")
    if form == HINGE:
        return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()
    if form == LOGISTIC:
        # -log sigmoid(s_real) - log(1 - sigmoid(s_fake))
        return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()
    return 0.5 * ((real_scores - 1.0) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def g_adv_loss(fake_scores: torch.Tensor, form: str = HINGE) -> torch.Tensor:
    """Generator-side adversarial loss, non-saturating variants."""
    _check_form(form)
    if fake_scores.numel() == 0:
        raise ValueError("score vector must be non-empty")
    if form == HINGE:
        return -fake_scores.mean()
    if form == LOGISTIC:
        return F.softplus(-fake_scores).mean()
    return 0.5 * ((fake_scores - 1.0) ** 2).mean()


def encoding_z_loss(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared distance between the sampled latent
    and the latent recovered from regenerated content."""
    if z.shape != z_hat.shape:
        raise ValueError(f"latent shapes differ: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    return ((z - z_hat) ** 2).sum(dim=1).mean()


def image_sq_error(a: torch.Tensor, b: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Batch mean of per-image squared error.

    ``reduction`` picks the per-image accumulation: "sum" (unnormalized
    squared norm, the default; weights scale with resolution) or "mean"
    (per-pixel average).
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = (a - b) ** 2
    flat = sq.reshape(sq.shape[0], -1)
    if reduction == "sum":
        return flat.sum(dim=1).mean()
    if reduction == "mean":
        return flat.mean(dim=1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def encoding_y_terms(y: torch.Tensor, y_hat: torch.Tensor,
                     d_scores_y_hat: torch.Tensor, form: str = HINGE,
                     reduction: str = "sum"):
    """Cycle-consistency terms: (mse, adv).

    ``y_hat`` is the re-measured reconstruction of the cycle; its
    discriminator scores feed the generator-side adversarial term.  The
    discriminator-side term on ``y_hat`` lives in the main D loss.
    """
    mse = image_sq_error(y, y_hat, reduction=reduction)
    adv = g_adv_loss(d_scores_y_hat, form=form)
    return mse, adv


def total_objective(parts: LossReport, weights: LossWeights) -> float:
    """Combine generator-side parts; with both weights zero this is exactly
    the plain adversarial objective."""
    return (parts.g_adv
            + weights.lambda_z * parts.z_rec
            + weights.lambda_y * (parts.y_rec_mse + parts.y_rec_adv))
