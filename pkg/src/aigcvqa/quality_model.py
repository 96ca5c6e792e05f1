"""Frame-level quality predictor.

A frozen per-frame feature provider produces ``[F, D]`` embeddings; a small
trainable head maps each frame to 100 independent sigmoid probabilities, one
per integer score bin, and frames are decoded to scalar scores by a weighted
average over the bins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

NUM_BINS = 100


class QualityModelError(ValueError):
    pass


class ScoreBins:
    """The integer score levels 0..99 that the distribution head predicts over."""

    def __init__(self) -> None:
        self.values = torch.arange(NUM_BINS, dtype=torch.float64)

    def __len__(self) -> int:
        return NUM_BINS

    def as_tensor(self, like: torch.Tensor | None = None) -> torch.Tensor:
        if like is None:
            return self.values
        return self.values.to(dtype=like.dtype, device=like.device)


DEFAULT_BINS = ScoreBins()


@dataclass
class QualityModelConfig:
    embedding_dim: int = 16
    hidden_dim: int = 32
    frame_count: int = 8
    score_scale: str = "unit"  # "unit" (0-1) or "hundred" (0-100)
    provider: str = "pooled_stats"
    provider_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("embedding_dim", "hidden_dim", "frame_count"):
            if getattr(self, name) < 1:
                raise QualityModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.score_scale not in ("unit", "hundred"):
            raise QualityModelError(f"score_scale must be 'unit' or 'hundred', got {self.score_scale!r}")


# ---------------------------------------------------------------------------
# feature providers


class FeatureProvider(Protocol):
    """Maps a ``[F, H, W, C]`` frame stack to ``[F, D]`` features."""

    dim: int

    def __call__(self, frames: np.ndarray) -> np.ndarray: ...


def _frame_stats(frames: np.ndarray) -> np.ndarray:
    # per-frame channel means, channel stds, mean |dx|, mean |dy|
    f = frames.astype(np.float64)
    means = f.mean(axis=(1, 2))
    stds = f.std(axis=(1, 2))
    gray = f.mean(axis=3)
    dx = np.abs(np.diff(gray, axis=2)).mean(axis=(1, 2)) if gray.shape[2] > 1 else np.zeros(len(f))
    dy = np.abs(np.diff(gray, axis=1)).mean(axis=(1, 2)) if gray.shape[1] > 1 else np.zeros(len(f))
    return np.concatenate([means, stds, dx[:, None], dy[:, None]], axis=1)


class MeanPoolProvider:
    """Global average pooling of pixel values followed by a fixed random projection."""

    def __init__(self, dim: int = 16, channels: int = 3, seed: int = 0) -> None:
        self.dim = dim
        self.channels = channels
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((channels, dim)) / np.sqrt(channels)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        pooled = frames.astype(np.float64).mean(axis=(1, 2))
        return pooled @ self.projection


class PooledStatsProvider:
    """Pooled colour, contrast and gradient-energy statistics, randomly projected.

    Stands in for a pretrained backbone: cheap, frozen and sensitive to the
    sharpness and contrast cues that drive perceived frame quality.
    """

    def __init__(self, dim: int = 16, channels: int = 3, seed: int = 0) -> None:
        self.dim = dim
        self.channels = channels
        n_stats = 2 * channels + 2
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_stats, dim)) / np.sqrt(n_stats)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        stats = _frame_stats(frames)
        # pixel values are expected in [0, 1]; gradient energy is rescaled to a similar range
        stats[:, 2 * self.channels :] *= 4.0
        return stats @ self.projection


PROVIDERS: dict[str, Callable[..., FeatureProvider]] = {
    "mean_pool": MeanPoolProvider,
    "pooled_stats": PooledStatsProvider,
}


def register_provider(name: str, factory: Callable[..., FeatureProvider]) -> None:
    PROVIDERS[name] = factory


def build_provider(name: str, dim: int, seed: int = 0, channels: int = 3) -> FeatureProvider:
    try:
        factory = PROVIDERS[name]
    except KeyError:
        raise QualityModelError(
            f"unknown feature provider {name!r}; registered: {sorted(PROVIDERS)}"
        ) from None
    return factory(dim=dim, seed=seed, channels=channels)


def extract_features(frames: np.ndarray, provider: FeatureProvider) -> np.ndarray:
    """Run ``provider`` on a ``[F, H, W, C]`` stack and validate the ``[F, D]`` result."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise QualityModelError(f"expected a [F, H, W, C] frame stack with F >= 1, got shape {frames.shape}")
    out = np.asarray(provider(frames), dtype=np.float64)
    n = frames.shape[0]
    if out.ndim != 2 or out.shape[0] != n:
        raise QualityModelError(f"provider returned shape {out.shape}, expected ({n}, D)")
    if out.shape[1] < 1:
        raise QualityModelError("provider returned zero-width features")
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise QualityModelError(f"provider produced non-finite features for frame(s) {idx.tolist()}")
    return out


# ---------------------------------------------------------------------------
# distribution head and decoding


class DistributionHead(nn.Module):
    """Per-frame MLP: Linear -> ReLU -> Linear to 100 score-bin logits."""

    def __init__(self, embedding_dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.hidden = nn.Linear(embedding_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, NUM_BINS)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(features)))


class QualityModel(nn.Module):
    def __init__(self, config: QualityModelConfig) -> None:
        super().__init__()
        self.config = config
        self.head = DistributionHead(config.embedding_dim, config.hidden_dim)
        self.double()

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.head(features)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Return per-bin probabilities with shape ``features.shape[:-1] + (100,)``."""
        return predict_distribution(features, self.head)

    def predict_scores(self, features: torch.Tensor) -> torch.Tensor:
        """Video scores on the configured scale for ``[..., F, D]`` features."""
        frame_scores = decode_frame_scores(self(features))
        video = frame_scores.mean(dim=-1)
        if self.config.score_scale == "hundred":
            video = video * 100.0
        return video


def predict_distribution(features: torch.Tensor, head: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    logits = head(features)
    if logits.shape[-1] != NUM_BINS:
        raise QualityModelError(f"head must emit {NUM_BINS} logits per frame, got {logits.shape[-1]}")
    if not torch.isfinite(logits).all():
        raise QualityModelError("distribution head produced non-finite logits")
    return torch.sigmoid(logits)


def decode_frame_scores(probs: torch.Tensor, bins: ScoreBins = DEFAULT_BINS) -> torch.Tensor:
    """Expected score per frame: ``sum(p * s) / (sum(p) * 100)``, in ``[0, 0.99]``.

    Works on any leading batch shape; the last axis must be the 100 bins.
    """
    if probs.shape[-1] != NUM_BINS:
        raise QualityModelError(f"expected {NUM_BINS} bins on the last axis, got shape {tuple(probs.shape)}")
    mass = probs.sum(dim=-1)
    zero = mass == 0
    if zero.any():
        idx = [tuple(i) if len(i) > 1 else int(i[0]) for i in torch.nonzero(zero).tolist()]
        raise QualityModelError(f"zero probability mass for frame(s) {idx}")
    weighted = (probs * bins.as_tensor(probs)).sum(dim=-1)
    return weighted / (mass * NUM_BINS)


def predict_video_score(frame_scores: Sequence[float] | torch.Tensor) -> torch.Tensor | float:
    if isinstance(frame_scores, torch.Tensor):
        if frame_scores.numel() == 0:
            raise QualityModelError("cannot average an empty set of frame scores")
        return frame_scores.mean(dim=-1)
    scores = list(frame_scores)
    if not scores:
        raise QualityModelError("cannot average an empty set of frame scores")
    return float(sum(scores) / len(scores))
