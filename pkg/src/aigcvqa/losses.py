"""MAE, Gaussian soft-label BCE and their product, the frame consistency loss.

Scale conventions: decoded frame scores live in [0, 0.99], so the MAE term
compares them with the ground truth divided by 100; the Gaussian labels are
centred on the ground truth on the 0-100 scale, matching the bin values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .quality_model import DEFAULT_BINS, NUM_BINS, ScoreBins, decode_frame_scores

PROB_EPS = 1e-7
MIN_SIGMA = 1.0 / math.sqrt(2.0 * math.pi)
LOSS_MODES = ("fcl", "mae", "bce")


class LossError(ValueError):
    pass


@dataclass
class GaussianLabelField:
    labels: torch.Tensor  # [..., F, 100]
    sigma: float


@dataclass
class LossBreakdown:
    """Loss components; each field is a scalar or a per-video ``[B]`` tensor."""

    mae: torch.Tensor
    bce: torch.Tensor
    fcl: torch.Tensor
    mode: str = "fcl"

    @property
    def objective(self) -> torch.Tensor:
        """Training objective for ``mode``, averaged over videos."""
        return getattr(self, self.mode).mean()

    def summary(self) -> dict[str, float]:
        return {
            "mae": float(self.mae.detach().mean()),
            "bce": float(self.bce.detach().mean()),
            "fcl": float(self.fcl.detach().mean()),
        }


def mae_loss(frame_scores: Sequence[float] | torch.Tensor, y: float | torch.Tensor) -> torch.Tensor:
    """``|mean(frame_scores) - y|`` with ``y`` on the unit scale; batched over leading dims."""
    scores = torch.as_tensor(frame_scores, dtype=torch.float64)
    if scores.numel() == 0 or scores.shape[-1] == 0:
        raise LossError("mae_loss needs at least one frame score")
    y = torch.as_tensor(y, dtype=scores.dtype)
    return (scores.mean(dim=-1) - y).abs()


def gaussian_labels(
    y: float | torch.Tensor,
    sigma: float,
    bins: ScoreBins = DEFAULT_BINS,
    frames: int = 1,
) -> GaussianLabelField:
    """Gaussian density over the score bins centred on ``y`` (0-100 scale), repeated per frame.

    ``y`` may be a ``[B]`` tensor, giving labels of shape ``[B, frames, 100]``.
    """
    if not sigma > MIN_SIGMA:
        raise LossError(f"sigma must exceed 1/sqrt(2*pi) ~ {MIN_SIGMA:.6f} so labels stay below 1, got {sigma}")
    if frames < 1:
        raise LossError(f"frame count must be >= 1, got {frames}")
    s = bins.as_tensor()
    y = torch.as_tensor(y, dtype=torch.float64)
    row = torch.exp(-((s - y.unsqueeze(-1)) ** 2) / (2.0 * sigma**2)) / (sigma * math.sqrt(2.0 * math.pi))
    labels = row.unsqueeze(-2).expand(*row.shape[:-1], frames, NUM_BINS)
    return GaussianLabelField(labels=labels, sigma=float(sigma))


def bce_loss(probs: torch.Tensor, labels: GaussianLabelField | torch.Tensor) -> torch.Tensor:
    """Mean soft-label binary cross-entropy over frames and bins; one value per video."""
    d = labels.labels if isinstance(labels, GaussianLabelField) else torch.as_tensor(labels, dtype=probs.dtype)
    if d.shape != probs.shape:
        raise LossError(f"label shape {tuple(d.shape)} does not match distribution shape {tuple(probs.shape)}")
    if probs.shape[-1] != NUM_BINS:
        raise LossError(f"expected {NUM_BINS} bins, got {probs.shape[-1]}")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    per_bin = -(d * torch.log(p) + (1.0 - d) * torch.log1p(-p))
    return per_bin.mean(dim=(-2, -1))


def fcl_loss(
    probs: torch.Tensor,
    y_hundred: float | torch.Tensor,
    sigma: float,
    bins: ScoreBins = DEFAULT_BINS,
    mode: str = "fcl",
) -> LossBreakdown:
    """Frame consistency loss for ``[F, 100]`` or batched ``[B, F, 100]`` distributions.

    ``y_hundred`` is the ground truth on the 0-100 scale. ``mode`` only picks
    which component :attr:`LossBreakdown.objective` returns.
    """
    if mode not in LOSS_MODES:
        raise LossError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    if probs.dim() < 2:
        raise LossError(f"expected [F, 100] or [B, F, 100] probabilities, got shape {tuple(probs.shape)}")
    y = torch.as_tensor(y_hundred, dtype=probs.dtype)
    if y.shape != probs.shape[:-2]:
        raise LossError(f"targets of shape {tuple(y.shape)} do not match batch shape {tuple(probs.shape[:-2])}")
    frame_scores = decode_frame_scores(probs, bins)
    mae = mae_loss(frame_scores, y / 100.0)
    labels = gaussian_labels(y, sigma, bins, frames=probs.shape[-2])
    bce = bce_loss(probs, labels)
    return LossBreakdown(mae=mae, bce=bce, fcl=mae * bce, mode=mode)
