"""Manifests, frame decoding and sampling, and the synthetic benchmark set."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

DEFAULT_FRAMES = 8
MANIFEST_COLUMNS = ("video_id", "path", "mos")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: str
    mos: float
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scale: tuple[float, float] = (0.0, 100.0)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: str | None) -> "DatasetManifest":
        if not name:
            return self
        return DatasetManifest([e for e in self.entries if e.split == name], self.scale, self.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def ground_truth(self) -> dict[str, float]:
        return {e.video_id: e.mos for e in self.entries}

    def to_unit(self, mos: float) -> float:
        lo, hi = self.scale
        return (mos - lo) / (hi - lo)

    def from_unit(self, unit: float) -> float:
        lo, hi = self.scale
        return lo + unit * (hi - lo)

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*MANIFEST_COLUMNS, "split"])
            for e in self.entries:
                w.writerow([e.video_id, e.path, repr(float(e.mos)), e.split])


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray  # [F, H, W, C]
    mos_raw: float
    mos_unit: float
    mos_hundred: float


def load_manifest(path: str | Path, scale: tuple[float, float] = (0.0, 100.0), check_paths: bool = True) -> DatasetManifest:
    """Parse a ``video_id,path,mos[,split]`` CSV. Errors cite the file line number."""
    path = Path(path)
    lo, hi = scale
    if not hi > lo:
        raise DataError(f"invalid MOS scale {scale}")
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from None
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        if tuple(header[:3]) != MANIFEST_COLUMNS or len(header) > 4 or (len(header) == 4 and header[3] != "split"):
            raise DataError(f"{path}: header must be video_id,path,mos[,split], got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataError(f"{path}: row {lineno}: expected at least 3 columns, got {len(row)}")
            vid, vpath, raw = (c.strip() for c in row[:3])
            split = row[3].strip() if len(row) > 3 else ""
            if vid in seen:
                raise DataError(f"{path}: row {lineno}: duplicate video_id {vid!r} (first seen on row {seen[vid]})")
            seen[vid] = lineno
            try:
                mos = float(raw)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: mos {raw!r} is not a number") from None
            if not lo <= mos <= hi:
                raise DataError(f"{path}: row {lineno}: mos {mos} outside declared range [{lo}, {hi}]")
            if check_paths:
                p = Path(vpath) if Path(vpath).is_absolute() else root / vpath
                if not p.exists():
                    raise DataError(f"{path}: row {lineno}: video path {vpath!r} not found")
            entries.append(ManifestEntry(vid, vpath, mos, split))
    return DatasetManifest(entries, (float(lo), float(hi)), root)


# ---------------------------------------------------------------------------
# frame decoding

FrameDecoder = Callable[[Path], np.ndarray]


def _decode_npy(path: Path) -> np.ndarray:
    return np.load(path)


def _decode_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr[None]


def _decode_video(path: Path) -> np.ndarray:
    import cv2

    cap = cv2.VideoCapture(str(path))
    frames = []
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0)
    finally:
        cap.release()
    if not frames:
        raise DataError(f"no decodable frames in {path}")
    return np.stack(frames)


DECODERS: dict[str, FrameDecoder] = {
    ".npy": _decode_npy,
    ".png": _decode_image,
    ".jpg": _decode_image,
    ".jpeg": _decode_image,
    ".mp4": _decode_video,
    ".avi": _decode_video,
    ".mkv": _decode_video,
    ".mov": _decode_video,
}


def register_decoder(suffix: str, decoder: FrameDecoder) -> None:
    DECODERS[suffix.lower()] = decoder


def decode_video(path: str | Path) -> np.ndarray:
    """Decode ``path`` to a ``[T, H, W, C]`` float array using the decoder for its suffix."""
    path = Path(path)
    decoder = DECODERS.get(path.suffix.lower())
    if decoder is None:
        raise DataError(f"no frame decoder registered for {path.suffix!r} ({path})")
    try:
        frames = np.asarray(decoder(path))
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"failed to decode {path}: {exc}") from exc
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise DataError(f"{path}: decoded array has shape {frames.shape}, expected [T, H, W, C] with T >= 1")
    return frames


def sample_indices(total: int, count: int) -> list[int]:
    """Uniform frame indices ``floor(k * (T - 1) / (F - 1) + 0.5)``; repeats when T < F."""
    if total < 1:
        raise DataError("video has no frames")
    if count < 1:
        raise DataError(f"frame count must be >= 1, got {count}")
    if count == 1:
        return [0]
    return [min(total - 1, int(np.floor(k * (total - 1) / (count - 1) + 0.5))) for k in range(count)]


def sample_frames(video: np.ndarray, count: int = DEFAULT_FRAMES) -> np.ndarray:
    video = np.asarray(video)
    if video.ndim != 4:
        raise DataError(f"expected a [T, H, W, C] array, got shape {video.shape}")
    return video[sample_indices(video.shape[0], count)]


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, count: int = DEFAULT_FRAMES) -> VideoSample:
    frames = sample_frames(decode_video(manifest.resolve(entry)), count)
    unit = manifest.to_unit(entry.mos)
    return VideoSample(entry.video_id, frames, entry.mos, unit, 100.0 * unit)


def score_sigma(samples_hundred: list[float] | np.ndarray) -> float:
    """Population standard deviation of ground-truth scores on the 0-100 scale."""
    arr = np.asarray(samples_hundred, dtype=np.float64)
    if arr.size < 2:
        raise DataError("need at least two scores to estimate sigma")
    return float(arr.std())


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_SCALE = (0.0, 100.0)


def render_frame(quality: float, rng: np.random.Generator, size: int = 32, channels: int = 3) -> np.ndarray:
    """A textured frame whose sharpness and contrast grow with ``quality`` in [0, 1]."""
    noise = rng.standard_normal((size, size, channels))
    texture = ndimage.gaussian_filter(noise, sigma=(0.7, 0.7, 0))
    texture = texture / (texture.std() + 1e-12)
    blurred = ndimage.gaussian_filter(texture, sigma=(2.5, 2.5, 0))
    detail = quality * texture + (1.0 - quality) * blurred
    base = rng.uniform(0.35, 0.65, size=channels)
    frame = base + (0.05 + 0.12 * quality) * detail
    return np.clip(frame, 0.0, 1.0)


def render_video(qualities: np.ndarray | list[float], rng: np.random.Generator, size: int = 32, channels: int = 3) -> np.ndarray:
    return np.stack([render_frame(float(q), rng, size, channels) for q in qualities])


def planted_mos(qualities: np.ndarray | list[float], scale: tuple[float, float] = SYNTH_SCALE) -> float:
    """Ground truth for a synthetic video: the mean planted frame quality mapped onto ``scale``."""
    lo, hi = scale
    return float(lo + (hi - lo) * np.mean(qualities))


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    videos: dict[str, np.ndarray]
    qualities: dict[str, np.ndarray]

    def sample(self, entry: ManifestEntry, count: int = DEFAULT_FRAMES) -> VideoSample:
        frames = sample_frames(self.videos[entry.video_id], count)
        unit = self.manifest.to_unit(entry.mos)
        return VideoSample(entry.video_id, frames, entry.mos, unit, 100.0 * unit)

    def materialize(self, directory: str | Path) -> Path:
        """Write every video as ``.npy`` plus ``manifest.csv``; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for vid, frames in self.videos.items():
            np.save(directory / f"{vid}.npy", frames)
        path = directory / "manifest.csv"
        self.manifest.write(path)
        return path


def generate_synthetic_dataset(
    n_videos: int,
    seed: int = 0,
    *,
    n_frames: int = 16,
    size: int = 32,
    spread: float = 0.15,
    test_fraction: float = 0.0,
) -> SyntheticDataset:
    """Videos with a planted per-frame quality and ground truth equal to its mean.

    Base qualities are uniform in [0.2, 0.8]; each video gets zero-mean
    per-frame offsets of amplitude up to ``spread`` in shuffled order, so
    frames vary in quality while the video mean stays exactly planted.
    The last ``round(test_fraction * n_videos)`` videos are tagged ``test``.
    """
    if n_videos < 1:
        raise DataError(f"n_videos must be >= 1, got {n_videos}")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * n_videos))
    entries, videos, qualities = [], {}, {}
    ramp = np.linspace(-1.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    for i in range(n_videos):
        vid = f"synth_{i:04d}"
        base = rng.uniform(0.2, 0.8)
        amp = rng.uniform(0.0, spread)
        q = base + amp * rng.permutation(ramp)
        q = q - q.mean() + base
        videos[vid] = render_video(q, rng, size)
        qualities[vid] = q
        split = "test" if i >= n_videos - n_test else "train"
        entries.append(ManifestEntry(vid, f"{vid}.npy", planted_mos(q), split))
    return SyntheticDataset(DatasetManifest(entries, SYNTH_SCALE, Path(".")), videos, qualities)
