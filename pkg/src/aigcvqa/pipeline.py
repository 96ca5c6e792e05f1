"""Train/predict orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data_io
from .config import RunConfig
from .cropper import CropConfig, S2CNet, SidecarDetector, StubDetector, crop_frame, grid_candidates
from .crop_training import train_crop_head
from .fgm import TrainingLog, train
from .losses import fcl_loss
from .quality_model import QualityModel, build_provider, decode_frame_scores, extract_features

log = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


# ---------------------------------------------------------------------------
# cropping stage


@dataclass
class FrameCropper:
    net: S2CNet
    detector: StubDetector | SidecarDetector

    def __call__(self, frames: np.ndarray, source: str | None = None) -> np.ndarray:
        """Crop each frame to its best-scoring window at native resolution.

        Windows share one scale so the cropped stack keeps a single shape;
        no resampling, which would smear the sharpness cues being scored.
        """
        h, w = frames.shape[1:3]
        candidates = grid_candidates(w, h, scales=(self.net.config.sample_scale,))
        crops = []
        for frame in frames:
            x1, y1, x2, y2 = crop_frame(frame, self.net, self.detector, candidates, source).box
            crops.append(frame[y1:y2, x1:x2])
        return np.stack(crops).astype(np.float64)


def build_detector(cfg: CropConfig) -> StubDetector | SidecarDetector:
    if cfg.detector == "sidecar":
        return SidecarDetector(dim=cfg.feature_dim, seed=cfg.seed)
    return StubDetector(cfg.stub_boxes, dim=cfg.feature_dim, seed=cfg.seed)


def build_crop_net(cfg: CropConfig) -> S2CNet:
    """Load the crop head from ``cfg.head_checkpoint`` or fit one on synthetic scenes."""
    torch.manual_seed(cfg.seed)
    if cfg.head_checkpoint:
        state = torch.load(cfg.head_checkpoint, map_location="cpu", weights_only=True)
        net = S2CNet(cfg)
        net.load_state_dict(state)
        return net
    log.info("no crop head checkpoint; fitting one on %d synthetic scenes", cfg.pretrain_scenes)
    return train_crop_head(cfg, n_scenes=cfg.pretrain_scenes, epochs=cfg.pretrain_epochs, seed=cfg.seed)


def build_cropper(cfg: CropConfig) -> FrameCropper | None:
    if not cfg.enabled:
        return None
    return FrameCropper(build_crop_net(cfg), build_detector(cfg))


# ---------------------------------------------------------------------------
# features and losses


def video_features(
    samples: Sequence[data_io.VideoSample],
    cfg: RunConfig,
    cropper: FrameCropper | None = None,
    sources: Sequence[str | None] | None = None,
) -> list[torch.Tensor]:
    """Frozen ``[F, D]`` features per video (the provider is not trained, so this runs once)."""
    channels = samples[0].frames.shape[-1] if samples else 3
    provider = build_provider(cfg.model.provider, cfg.model.embedding_dim, cfg.model.provider_seed, channels)
    out = []
    for i, s in enumerate(samples):
        frames = s.frames
        if cropper is not None:
            frames = cropper(frames, sources[i] if sources else None)
        out.append(torch.from_numpy(extract_features(frames, provider)))
    return out


def make_loss_fn(sigma: float, mode: str):
    def loss_fn(model: QualityModel, batch):
        feats = torch.stack([b[0] for b in batch])
        y = torch.tensor([b[1] for b in batch], dtype=torch.float64)
        return fcl_loss(model(feats), y, sigma, mode=mode)

    return loss_fn


@dataclass
class TrainResult:
    model: QualityModel
    log: TrainingLog
    sigma: float


def fit(
    cfg: RunConfig,
    features: Sequence[torch.Tensor],
    targets_hundred: Sequence[float],
    sigma: float | None = None,
    on_step=None,
) -> TrainResult:
    """Train a fresh quality head on precomputed features and 0-100 targets."""
    seed_everything(cfg.seed)
    if sigma is None:
        sigma = cfg.loss.sigma if cfg.loss.sigma is not None else data_io.score_sigma(targets_hundred)
    model = QualityModel(cfg.model)
    dataset = list(zip(features, [float(t) for t in targets_hundred]))
    model, tlog = train(
        model,
        dataset,
        make_loss_fn(sigma, cfg.loss.mode),
        cfg.fgm,
        epochs=cfg.train.epochs,
        seed=cfg.seed,
        use_fgm=cfg.train.fgm,
        on_step=on_step,
    )
    return TrainResult(model, tlog, sigma)


def predict_unit(model: QualityModel, features: Sequence[torch.Tensor]) -> list[float]:
    """Video scores on the unit scale (mean of decoded frame scores)."""
    if not features:
        return []
    with torch.no_grad():
        scores = decode_frame_scores(model(torch.stack(list(features)))).mean(dim=-1)
    return [float(v) for v in scores]


def initial_loss(cfg: RunConfig, features: Sequence[torch.Tensor], targets_hundred: Sequence[float], sigma: float) -> float:
    """Objective of a freshly initialised model over the whole set (no training)."""
    seed_everything(cfg.seed)
    model = QualityModel(cfg.model)
    return evaluate_loss(model, features, targets_hundred, sigma, cfg.loss.mode)


def evaluate_loss(model: QualityModel, features, targets_hundred, sigma: float, mode: str = "fcl") -> float:
    with torch.no_grad():
        feats = torch.stack(list(features))
        y = torch.tensor(list(targets_hundred), dtype=torch.float64)
        return float(fcl_loss(model(feats), y, sigma, mode=mode).objective)


def load_samples(manifest: data_io.DatasetManifest, frames: int) -> tuple[list[data_io.VideoSample], list[str]]:
    samples, sources = [], []
    for entry in manifest:
        samples.append(data_io.load_sample(manifest, entry, frames))
        sources.append(str(manifest.resolve(entry)))
    return samples, sources


def resolve_manifest(cfg: RunConfig, out_dir: Path) -> Path:
    """Manifest path for a run; synthetic data is generated and written under ``out_dir``."""
    if cfg.data.source == "synthetic":
        syn = cfg.data.synthetic
        ds = data_io.generate_synthetic_dataset(
            syn.n_train + syn.n_test,
            cfg.seed,
            n_frames=syn.n_frames,
            size=syn.size,
            spread=syn.spread,
            test_fraction=syn.n_test / max(1, syn.n_train + syn.n_test),
        )
        return ds.materialize(out_dir / "synthetic")
    if not cfg.data.manifest:
        raise data_io.DataError("data.manifest is required when data.source is 'manifest'")
    return Path(cfg.data.manifest)
