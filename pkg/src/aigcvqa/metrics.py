"""Correlation metrics for quality prediction: PLCC, SROCC, KROCC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import stats


class MetricError(ValueError):
    pass


def _check(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise MetricError(f"need at least 2 samples, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise MetricError("inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("correlation is undefined for a constant input")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def plcc(x, y) -> float:
    x, y = _check(x, y)
    return _pearson(x, y)


def srocc(x, y) -> float:
    """Spearman correlation, ties resolved with average ranks."""
    x, y = _check(x, y)
    return _pearson(stats.rankdata(x), stats.rankdata(y))


def krocc(x, y, chunk: int = 1024) -> float:
    """Kendall tau-b from exact integer pair counts.

    ``sum(sign(dx) * sign(dy)) / sqrt(#pairs untied in x * #pairs untied in y)``
    over all pairs ``i < j``; rows are processed in chunks to bound memory.
    """
    x, y = _check(x, y)
    n = x.size
    s = tx = ty = 0
    for start in range(0, n, chunk):
        rows = slice(start, min(n, start + chunk))
        sx = np.sign(x[rows, None] - x[None, :]).astype(np.int64)
        sy = np.sign(y[rows, None] - y[None, :]).astype(np.int64)
        upper = np.arange(rows.start, rows.stop)[:, None] < np.arange(n)[None, :]
        s += int((sx * sy)[upper].sum())
        tx += int(np.abs(sx)[upper].sum())
        ty += int(np.abs(sy)[upper].sum())
    tau = s / math.sqrt(tx * ty) if tx != ty else s / tx
    return min(1.0, max(-1.0, tau))


@dataclass
class EvalReport:
    per_video: list[tuple[str, float, float]]  # (video_id, prediction, ground truth)
    plcc: float
    srocc: float
    krocc: float
    mean: float = field(init=False)

    def __post_init__(self) -> None:
        self.mean = (self.plcc + self.srocc + self.krocc) / 3.0

    @property
    def n(self) -> int:
        return len(self.per_video)

    def to_dict(self) -> dict:
        return {
            "plcc": self.plcc,
            "srocc": self.srocc,
            "krocc": self.krocc,
            "mean": self.mean,
            "n": self.n,
            "per_video": [
                {"video_id": vid, "prediction": pred, "ground_truth": gt} for vid, pred, gt in self.per_video
            ],
        }

    def to_json(self, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def report(per_video: Iterable[tuple[str, float, float]]) -> EvalReport:
    rows = sorted(per_video, key=lambda r: r[0])
    preds = [r[1] for r in rows]
    gts = [r[2] for r in rows]
    return EvalReport(per_video=rows, plcc=plcc(preds, gts), srocc=srocc(preds, gts), krocc=krocc(preds, gts))


def read_predictions(path: str | Path) -> list[tuple[str, float]]:
    """Read a JSON-lines file of ``{"video_id": ..., "score": ...}`` records."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((str(rec["video_id"]), float(rec["score"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MetricError(f"{path}:{lineno}: malformed prediction record ({exc})") from None
    return out


def write_predictions(path: str | Path, predictions: Iterable[tuple[str, float]]) -> None:
    with open(path, "w") as fh:
        for vid, score in predictions:
            fh.write(json.dumps({"video_id": vid, "score": score}) + "\n")


def evaluate(predictions: Iterable[tuple[str, float]], ground_truth: Mapping[str, float]) -> EvalReport:
    """Join predictions with ground truth by video id and compute all metrics.

    Ground-truth entries without a prediction are ignored; unknown or
    duplicated prediction ids raise.
    """
    seen: dict[str, float] = {}
    dupes, unknown = [], []
    for vid, score in predictions:
        if vid in seen:
            dupes.append(vid)
        seen[vid] = score
        if vid not in ground_truth:
            unknown.append(vid)
    problems = []
    if dupes:
        problems.append(f"duplicate ids: {sorted(set(dupes))}")
    if unknown:
        problems.append(f"ids missing from manifest: {sorted(set(unknown))}")
    if problems:
        raise MetricError("; ".join(problems))
    if not seen:
        raise MetricError("no predictions to evaluate")
    return report((vid, score, float(ground_truth[vid])) for vid, score in seen.items())
