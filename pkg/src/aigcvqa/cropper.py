"""Content-aware crop selection with a spatial-semantic graph network.

Each crop candidate is scored on a graph whose nodes are the detected
objects plus the candidate region itself (always the last node). Edges mix
appearance similarity with projected spatial distances, node features pass
through an adjacency-weighted gate and a biased self-attention layer, and a
two-layer MLP on the mean node feature produces the aesthetic score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

DENOM_EPS = 1e-12
GRID_SCALES = (0.6, 0.75, 0.9)
GRID_STRIDE_FRACTION = 1.0 / 8.0

Box = tuple[int, int, int, int]  # x1, y1, x2, y2 in pixels, half-open


class CropError(ValueError):
    pass


@dataclass
class CropCandidate:
    box: Box
    score: float = float("nan")
    index: int = 0


@dataclass
class Detections:
    boxes: list[Box]
    features: np.ndarray  # [k, d]
    scores: list[float] = field(default_factory=list)


@dataclass
class CropConfig:
    enabled: bool = False
    feature_dim: int = 16
    spatial_dim: int = 4
    hidden_dim: int = 32
    top_n: int = 4
    fag_mode: str = "hadamard"  # or "projection"
    spatial_exp_sign: int = 1
    candidates: str = "grid"
    detector: str = "stub"  # or "sidecar"
    stub_boxes: list = field(default_factory=list)
    head_checkpoint: str | None = None
    pretrain_scenes: int = 50
    pretrain_epochs: int = 20
    sample_scale: float = 0.75  # window scale when cropping is the frame-sampling stage
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fag_mode not in ("hadamard", "projection"):
            raise CropError(f"fag_mode must be 'hadamard' or 'projection', got {self.fag_mode!r}")
        if self.spatial_exp_sign not in (1, -1):
            raise CropError(f"spatial_exp_sign must be +1 or -1, got {self.spatial_exp_sign}")
        if self.top_n < 1:
            raise CropError(f"top_n must be >= 1, got {self.top_n}")
        if self.candidates not in ("grid", "file"):
            raise CropError(f"candidates must be 'grid' or 'file', got {self.candidates!r}")
        if self.detector not in ("stub", "sidecar"):
            raise CropError(f"detector must be 'stub' or 'sidecar', got {self.detector!r}")
        if not 0.0 < self.sample_scale <= 1.0:
            raise CropError(f"sample_scale must be in (0, 1], got {self.sample_scale}")


# ---------------------------------------------------------------------------
# region features and detection providers


class RegionFeaturizer:
    """Pooled colour/contrast/gradient statistics of an image region, randomly projected.

    Plays the role of RoI pooling on a backbone feature map.
    """

    def __init__(self, dim: int = 16, channels: int = 3, seed: int = 0) -> None:
        self.dim = dim
        self.channels = channels
        n_stats = 2 * channels + 3
        rng = np.random.default_rng(seed + 7919)
        self.projection = rng.standard_normal((n_stats, dim)) / np.sqrt(n_stats)

    def stats(self, image: np.ndarray, box: Box) -> np.ndarray:
        x1, y1, x2, y2 = box
        region = image[y1:y2, x1:x2].astype(np.float64)
        gray = region.mean(axis=2)
        dx = np.abs(np.diff(gray, axis=1)).mean() if gray.shape[1] > 1 else 0.0
        dy = np.abs(np.diff(gray, axis=0)).mean() if gray.shape[0] > 1 else 0.0
        h, w = image.shape[:2]
        area = (x2 - x1) * (y2 - y1) / float(h * w)
        return np.concatenate(
            [region.mean(axis=(0, 1)), region.std(axis=(0, 1)), [4.0 * dx, 4.0 * dy, area]]
        )

    def __call__(self, image: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
        if len(boxes) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.stats(image, b) for b in boxes]) @ self.projection


class DetectionProvider(Protocol):
    dim: int

    def detect(self, image: np.ndarray, source: str | None = None) -> Detections: ...

    def region_features(self, image: np.ndarray, boxes: Sequence[Box]) -> np.ndarray: ...


class StubDetector:
    """Returns a configured list of boxes; features come from :class:`RegionFeaturizer`."""

    def __init__(self, boxes: Sequence[Sequence[int]] = (), dim: int = 16, seed: int = 0, channels: int = 3):
        self.boxes = [tuple(int(v) for v in b) for b in boxes]
        self.featurizer = RegionFeaturizer(dim, channels, seed)
        self.dim = dim

    def detect(self, image: np.ndarray, source: str | None = None) -> Detections:
        h, w = image.shape[:2]
        boxes = [clip_box(b, w, h) for b in self.boxes]
        boxes = [b for b in boxes if b[2] > b[0] and b[3] > b[1]]
        # configured order doubles as confidence order
        scores = [1.0 - i / max(len(boxes), 1) for i in range(len(boxes))]
        return Detections(boxes, self.region_features(image, boxes), scores)

    def region_features(self, image: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
        return self.featurizer(image, boxes)


class SidecarDetector:
    """Loads detections produced by an external model from ``<image>.detections.json``.

    The sidecar holds ``boxes``, ``features`` and ``scores``. Candidate-region
    features are computed locally and projected to the sidecar feature width.
    """

    suffix = ".detections.json"

    def __init__(self, dim: int = 16, seed: int = 0, channels: int = 3) -> None:
        self.dim = dim
        self.featurizer = RegionFeaturizer(dim, channels, seed)

    @classmethod
    def sidecar_path(cls, source: str | Path) -> Path:
        return Path(str(source) + cls.suffix)

    def detect(self, image: np.ndarray, source: str | None = None) -> Detections:
        if source is None:
            raise CropError("sidecar detector needs the source path of the image")
        path = self.sidecar_path(source)
        try:
            payload = json.loads(path.read_text())
            boxes = [tuple(int(round(v)) for v in b) for b in payload["boxes"]]
            feats = np.asarray(payload["features"], dtype=np.float64).reshape(len(boxes), -1)
            scores = [float(s) for s in payload.get("scores", [1.0] * len(boxes))]
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CropError(f"cannot read detections from {path}: {exc}") from None
        if len(scores) != len(boxes):
            raise CropError(f"{path}: {len(boxes)} boxes but {len(scores)} scores")
        if len(boxes) and feats.shape[1] != self.dim:
            raise CropError(f"{path}: feature width {feats.shape[1]} != configured {self.dim}")
        h, w = image.shape[:2]
        return Detections([clip_box(b, w, h) for b in boxes], feats, scores)

    def region_features(self, image: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
        return self.featurizer(image, boxes)


def clip_box(box: Sequence[int], width: int, height: int) -> Box:
    x1, y1, x2, y2 = (int(v) for v in box)
    return (min(max(x1, 0), width), min(max(y1, 0), height), min(max(x2, 0), width), min(max(y2, 0), height))


def detect_objects(image: np.ndarray, provider: DetectionProvider, top_n: int, source: str | None = None) -> Detections:
    """Top ``top_n`` detections by confidence; falls back to one whole-image node."""
    if top_n < 1:
        raise CropError(f"top_n must be >= 1, got {top_n}")
    det = provider.detect(image, source)
    if len(det.boxes) == 0:
        h, w = image.shape[:2]
        whole = (0, 0, w, h)
        return Detections([whole], provider.region_features(image, [whole]), [1.0])
    scores = det.scores or [1.0] * len(det.boxes)
    order = sorted(range(len(det.boxes)), key=lambda i: (-scores[i], i))[:top_n]
    return Detections(
        [det.boxes[i] for i in order],
        np.asarray(det.features, dtype=np.float64)[order],
        [scores[i] for i in order],
    )


# ---------------------------------------------------------------------------
# candidates


def grid_candidates(width: int, height: int, scales: Sequence[float] = GRID_SCALES) -> list[Box]:
    """Anchor grid: aspect-preserving windows at each scale, stride 1/8 of the image side."""
    sx = max(1, round(width * GRID_STRIDE_FRACTION))
    sy = max(1, round(height * GRID_STRIDE_FRACTION))
    out: list[Box] = []
    for scale in scales:
        cw = max(1, round(width * scale))
        ch = max(1, round(height * scale))
        for y in range(0, height - ch + 1, sy):
            for x in range(0, width - cw + 1, sx):
                out.append((x, y, x + cw, y + ch))
    return out


def box_centers(boxes: Sequence[Box]) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0], axis=1)


# ---------------------------------------------------------------------------
# graph operations; all accept optional leading batch dimensions


def appearance_similarity(features: torch.Tensor, phi: nn.Module, varphi: nn.Module) -> torch.Tensor:
    """``M_a[i, j] = phi(x_i) . varphi(x_j) / sqrt(d)``."""
    d = features.shape[-1]
    return phi(features) @ varphi(features).transpose(-1, -2) / math.sqrt(d)


def spatial_matrix(centers: torch.Tensor, proj_m: nn.Module, proj_n: nn.Module) -> torch.Tensor:
    """Squared distance between differently projected centers: ``||m(p_i) - n(p_j)||^2``."""
    a = proj_m(centers).unsqueeze(-2)
    b = proj_n(centers).unsqueeze(-3)
    return ((a - b) ** 2).sum(dim=-1)


def adjacency(m_a: torch.Tensor, m_p: torch.Tensor, exp_sign: int = 1) -> torch.Tensor:
    """Row-normalised ``M_a * exp(sign * M_p)``; raises if a row sum vanishes."""
    if m_a.shape != m_p.shape:
        raise CropError(f"M_a shape {tuple(m_a.shape)} != M_p shape {tuple(m_p.shape)}")
    w = m_a * torch.exp(exp_sign * m_p)
    denom = w.sum(dim=-1, keepdim=True)
    small = denom.abs() < DENOM_EPS
    if small.any():
        rows = torch.nonzero(small.squeeze(-1)).tolist()
        raise CropError(f"adjacency row sum vanishes (|sum| < {DENOM_EPS}) at row(s) {rows}")
    return w / denom


def feature_aggregation_gate(a: torch.Tensor, x: torch.Tensor, z: torch.Tensor, mode: str = "hadamard") -> torch.Tensor:
    """``ReLU(A (Z * X))`` with an elementwise gate, or ``ReLU(A X Z)`` with ``Z`` a d x d matrix."""
    n = x.shape[-2]
    if a.shape[-2:] != (n, n):
        raise CropError(f"adjacency shape {tuple(a.shape)} does not match {n} nodes")
    if mode == "hadamard":
        if z.shape[-2:] != x.shape[-2:]:
            raise CropError(f"gate shape {tuple(z.shape)} != feature shape {tuple(x.shape)}")
        return torch.relu(a @ (z * x))
    if mode == "projection":
        d = x.shape[-1]
        if z.shape != (d, d):
            raise CropError(f"projection gate must be {d}x{d}, got {tuple(z.shape)}")
        return torch.relu(a @ x @ z)
    raise CropError(f"unknown FAG mode {mode!r}")


def attention_weights(q: torch.Tensor, k: torch.Tensor, m_a: torch.Tensor, m_p: torch.Tensor) -> torch.Tensor:
    d = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d) + m_a + m_p
    return torch.softmax(logits, dim=-1)


def graph_self_attention(
    gated: torch.Tensor,
    x: torch.Tensor,
    m_a: torch.Tensor,
    m_p: torch.Tensor,
    w_q: nn.Module | None = None,
    w_k: nn.Module | None = None,
    w_v: nn.Module | None = None,
) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d) + M_a + M_p) V``; queries from the gate output, keys and values from ``x``."""
    if gated.shape != x.shape:
        raise CropError(f"query features {tuple(gated.shape)} != node features {tuple(x.shape)}")
    n = x.shape[-2]
    if m_a.shape[-2:] != (n, n) or m_p.shape[-2:] != (n, n):
        raise CropError("bias matrices must be square over the node set")
    q = w_q(gated) if w_q is not None else gated
    k = w_k(x) if w_k is not None else x
    v = w_v(x) if w_v is not None else x
    return attention_weights(q, k, m_a, m_p) @ v


# ---------------------------------------------------------------------------
# network


class S2CNet(nn.Module):
    def __init__(self, config: CropConfig) -> None:
        super().__init__()
        d, k = config.feature_dim, config.spatial_dim
        self.config = config
        self.phi = nn.Linear(d, d)
        self.varphi = nn.Linear(d, d)
        self.proj_m = nn.Linear(2, k)
        self.proj_n = nn.Linear(2, k)
        if config.fag_mode == "hadamard":
            self.gate = nn.Parameter(torch.ones(config.top_n + 1, d))
        else:
            self.gate = nn.Parameter(torch.eye(d))
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.mlp = nn.Sequential(nn.Linear(d, config.hidden_dim), nn.ReLU(), nn.Linear(config.hidden_dim, 1))
        gen = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for mod in (self.phi, self.varphi, self.proj_m, self.proj_n, self.w_q, self.w_k, self.w_v, *self.mlp):
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)
            # small spatial projections keep exp(M_p) well inside floating-point range
            self.proj_m.weight.mul_(0.5)
            self.proj_n.weight.mul_(0.5)
        self.double()

    def gate_for(self, n_nodes: int) -> torch.Tensor:
        if self.config.fag_mode == "projection":
            return self.gate
        n_obj = n_nodes - 1
        if n_obj > self.config.top_n:
            raise CropError(f"{n_obj} object nodes exceed top_n={self.config.top_n}")
        # object rows in confidence order, candidate row always last
        return torch.cat([self.gate[:n_obj], self.gate[-1:]], dim=0)

    def graph(self, features: torch.Tensor, centers: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        m_a = appearance_similarity(features, self.phi, self.varphi)
        m_p = spatial_matrix(centers, self.proj_m, self.proj_n)
        return m_a, m_p, adjacency(m_a, m_p, self.config.spatial_exp_sign)

    def forward(self, features: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
        """Score graphs given node features ``[..., N+1, d]`` and normalised centers ``[..., N+1, 2]``."""
        m_a, m_p, a = self.graph(features, centers)
        gated = feature_aggregation_gate(a, features, self.gate_for(features.shape[-2]), self.config.fag_mode)
        updated = graph_self_attention(gated, features, m_a, m_p, self.w_q, self.w_k, self.w_v)
        return self.mlp(updated.mean(dim=-2)).squeeze(-1)


@dataclass
class CropGraphInputs:
    """Batched node features and normalised centers for every candidate of one image."""

    features: torch.Tensor  # [C, N+1, d]
    centers: torch.Tensor  # [C, N+1, 2]
    boxes: list[Box]


def build_graph_inputs(
    image: np.ndarray,
    candidates: Sequence[Box],
    detections: Detections,
    provider: DetectionProvider,
) -> CropGraphInputs:
    h, w = image.shape[:2]
    for i, (x1, y1, x2, y2) in enumerate(candidates):
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise CropError(f"candidate {i} box {(x1, y1, x2, y2)} is empty or outside the {w}x{h} image")
    obj_feats = np.asarray(detections.features, dtype=np.float64)
    cand_feats = provider.region_features(image, candidates)
    n_obj, c = len(detections.boxes), len(candidates)
    feats = np.concatenate([np.broadcast_to(obj_feats, (c, n_obj, obj_feats.shape[-1])), cand_feats[:, None, :]], axis=1)
    scale = np.array([w, h], dtype=np.float64)
    obj_c = box_centers(detections.boxes) / scale
    cand_c = box_centers(candidates) / scale
    centers = np.concatenate([np.broadcast_to(obj_c, (c, n_obj, 2)), cand_c[:, None, :]], axis=1)
    return CropGraphInputs(torch.from_numpy(feats.copy()), torch.from_numpy(centers.copy()), list(candidates))


def score_candidates(
    image: np.ndarray,
    candidates: Sequence[Box],
    provider: DetectionProvider,
    net: S2CNet,
    source: str | None = None,
) -> list[CropCandidate]:
    if len(candidates) == 0:
        raise CropError("no crop candidates to score")
    det = detect_objects(image, provider, net.config.top_n, source)
    inputs = build_graph_inputs(image, candidates, det, provider)
    with torch.no_grad():
        scores = net(inputs.features, inputs.centers)
    return [CropCandidate(tuple(b), float(s), i) for i, (b, s) in enumerate(zip(candidates, scores.tolist()))]


def select_best_crop(scored: Sequence[CropCandidate]) -> CropCandidate:
    if len(scored) == 0:
        raise CropError("cannot select from an empty candidate list")
    best = 0
    for i, cand in enumerate(scored):
        if cand.score > scored[best].score:
            best = i
    return scored[best]


def crop_train_loss(pred: torch.Tensor, target: torch.Tensor, margin: float = 0.1, beta: float = 1.0) -> torch.Tensor:
    """Weighted smooth-L1 plus pairwise hinge ranking loss over one image's candidates.

    Each residual is weighted by ``1 + |target - mean(target)|`` so that
    clearly good and clearly bad crops dominate; the ranking term averages
    ``max(0, margin - (pred_i - pred_j))`` over the pairs ordered by target,
    ``target_i > target_j``; it is zero when no such pair exists.
    """
    if pred.shape != target.shape:
        raise CropError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    weights = 1.0 + (target - target.mean()).abs()
    smooth = nn.functional.smooth_l1_loss(pred, target, reduction="none", beta=beta)
    reg = (weights * smooth).mean()
    if pred.numel() < 2:
        return reg
    better = target.unsqueeze(-1) > target.unsqueeze(-2)
    diff = pred.unsqueeze(-1) - pred.unsqueeze(-2)
    hinge = torch.relu(margin - diff)[better]
    if hinge.numel() == 0:
        return reg
    return reg + hinge.mean()


def crop_frame(
    image: np.ndarray,
    net: S2CNet,
    provider: DetectionProvider,
    candidates: Sequence[Box] | None = None,
    source: str | None = None,
) -> CropCandidate:
    h, w = image.shape[:2]
    cands = grid_candidates(w, h) if candidates is None else candidates
    return select_best_crop(score_candidates(image, cands, provider, net, source))
