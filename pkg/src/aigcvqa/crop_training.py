"""Synthetic cropping scenes and a small trainer for the crop scoring head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .cropper import (
    Box,
    CropConfig,
    S2CNet,
    StubDetector,
    build_graph_inputs,
    crop_train_loss,
    detect_objects,
)


@dataclass
class Scene:
    image: np.ndarray  # [H, W, C]
    salient: Box
    candidates: list[Box]
    targets: np.ndarray  # fraction of the salient box covered by each candidate
    detector: StubDetector


def coverage(candidate: Box, region: Box) -> float:
    ix = max(0, min(candidate[2], region[2]) - max(candidate[0], region[0]))
    iy = max(0, min(candidate[3], region[3]) - max(candidate[1], region[1]))
    area = (region[2] - region[0]) * (region[3] - region[1])
    return ix * iy / area


def corner_candidates(size: int, scale: float = 0.6) -> list[Box]:
    c = round(size * scale)
    return [(0, 0, c, c), (size - c, 0, size, c), (0, size - c, c, size), (size - c, size - c, size, size)]


def make_scene(rng: np.random.Generator, size: int = 64, patch: int = 12, dim: int = 16, seed: int = 0) -> Scene:
    """Flat, softly shaded background with one high-contrast textured square near a corner.

    Exactly one of the four corner candidates contains the square. The stub
    detector reports the square first, then two background distractor boxes.
    """
    base = rng.uniform(0.3, 0.7, size=3)
    shade = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(6, 6, 0))
    image = base + 0.03 * shade / (shade.std() + 1e-12)
    # keep the square clear of the opposite corner crop, which starts at size - c
    lo, hi = 2, size - round(size * 0.6) - patch + 1
    x = int(rng.integers(lo, hi))
    y = int(rng.integers(lo, hi))
    if rng.random() < 0.5:
        x = size - x - patch
    if rng.random() < 0.5:
        y = size - y - patch
    texture = rng.random((patch, patch, 1)) > 0.5
    colour = rng.uniform(0.0, 1.0, size=3)
    image[y : y + patch, x : x + patch] = np.where(texture, colour, 1.0 - colour)
    image = np.clip(image, 0.0, 1.0)
    salient: Box = (x, y, x + patch, y + patch)

    distractors = []
    for _ in range(2):
        dx, dy = (int(v) for v in rng.integers(0, size - patch, size=2))
        distractors.append((dx, dy, dx + patch, dy + patch))
    candidates = corner_candidates(size)
    targets = np.array([coverage(c, salient) for c in candidates])
    detector = StubDetector([salient, *distractors], dim=dim, seed=seed)
    return Scene(image, salient, candidates, targets, detector)


def train_crop_head(
    config: CropConfig,
    n_scenes: int = 50,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-2,
) -> S2CNet:
    """Fit an :class:`S2CNet` on ``n_scenes`` synthetic scenes with the crop ranking loss."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    net = S2CNet(config)
    scenes = [make_scene(rng, dim=config.feature_dim, seed=config.seed) for _ in range(n_scenes)]
    batches = []
    for sc in scenes:
        det = detect_objects(sc.image, sc.detector, config.top_n)
        inputs = build_graph_inputs(sc.image, sc.candidates, det, sc.detector)
        batches.append((inputs.features, inputs.centers, torch.from_numpy(sc.targets)))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    order_rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        for i in order_rng.permutation(len(batches)):
            feats, centers, target = batches[i]
            loss = crop_train_loss(net(feats, centers), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return net
