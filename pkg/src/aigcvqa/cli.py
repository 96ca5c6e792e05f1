"""Command line: ``aigcvqa {train,eval,crop,metrics}``.

Exit codes: 0 success, 2 usage/config/data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data_io, metrics, pipeline
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .cropper import CropError, S2CNet, grid_candidates, score_candidates, select_best_crop
from .fgm import FgmError, TrainingDiverged
from .losses import LossError
from .quality_model import QualityModel, QualityModelError

log = logging.getLogger("aigcvqa")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
USAGE_ERRORS = (ConfigError, data_io.DataError, CropError, metrics.MetricError, QualityModelError, LossError, FgmError)


def _dump(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    if args.seed is not None:
        cfg = config_from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.hash()}


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out_dir = Path(args.out or cfg.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("resolved config hash %s", cfg.hash())
    (out_dir / "resolved_config.json").write_text(json.dumps(_provenance(cfg), indent=2, sort_keys=True) + "\n")

    manifest_path = pipeline.resolve_manifest(cfg, out_dir)
    manifest = data_io.load_manifest(manifest_path, (cfg.data.mos_min, cfg.data.mos_max))
    train_split = manifest.split(cfg.data.train_split) if any(e.split for e in manifest) else manifest
    if len(train_split) < 2:
        raise data_io.DataError(f"training split {cfg.data.train_split!r} needs at least 2 videos, has {len(train_split)}")

    pipeline.seed_everything(cfg.seed)
    cropper = pipeline.build_cropper(cfg.crop)
    samples, sources = pipeline.load_samples(train_split, cfg.model.frame_count)
    feats = pipeline.video_features(samples, cfg, cropper, sources)
    targets = [s.mos_hundred for s in samples]
    sigma = cfg.loss.sigma if cfg.loss.sigma is not None else data_io.score_sigma(targets)
    log.info("sigma for Gaussian labels: %.6f", sigma)

    result = pipeline.fit(cfg, feats, targets, sigma)
    (out_dir / "train_log.jsonl").write_text(result.log.to_jsonl())
    ckpt = {
        "state_dict": result.model.state_dict(),
        "crop_state_dict": cropper.net.state_dict() if cropper else None,
        "sigma": sigma,
        "manifest": str(manifest_path),
        **_provenance(cfg),
    }
    torch.save(ckpt, out_dir / "checkpoint.pt")
    summary = {
        "steps": len(result.log.records),
        "aborted_steps": result.log.aborted,
        "sigma": sigma,
        "initial_objective": pipeline.initial_loss(cfg, feats, targets, sigma),
        "final_objective": pipeline.evaluate_loss(result.model, feats, targets, sigma, cfg.loss.mode),
        **_provenance(cfg),
    }
    _dump(summary, str(out_dir / "summary.json"))
    log.info("wrote checkpoint and log to %s", out_dir)
    return EXIT_OK


def _load_checkpoint(path: str) -> tuple[dict, RunConfig]:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
    cfg = config_from_dict(ckpt["config"])
    if cfg.hash() != ckpt.get("config_hash"):
        log.warning("checkpoint config hash %s does not match its stored config (%s)", ckpt.get("config_hash"), cfg.hash())
    return ckpt, cfg


def cmd_eval(args) -> int:
    ckpt, cfg = _load_checkpoint(args.checkpoint)
    if args.config:
        other = load_config(args.config)
        if other.hash() != cfg.hash():
            log.warning("config %s (hash %s) differs from checkpoint config (hash %s); using the checkpoint's",
                        args.config, other.hash(), cfg.hash())
    manifest = data_io.load_manifest(args.manifest, (cfg.data.mos_min, cfg.data.mos_max))
    manifest = manifest.split(args.split)
    if len(manifest) == 0:
        raise data_io.DataError(f"manifest {args.manifest} has no videos" + (f" in split {args.split!r}" if args.split else ""))

    model = QualityModel(cfg.model)
    model.load_state_dict(ckpt["state_dict"])
    cropper = None
    if cfg.crop.enabled:
        net = S2CNet(cfg.crop)
        net.load_state_dict(ckpt["crop_state_dict"])
        cropper = pipeline.FrameCropper(net, pipeline.build_detector(cfg.crop))
    samples, sources = pipeline.load_samples(manifest, cfg.model.frame_count)
    feats = pipeline.video_features(samples, cfg, cropper, sources)
    unit = pipeline.predict_unit(model, feats)
    preds = [(s.video_id, manifest.from_unit(u)) for s, u in zip(samples, unit)]
    if args.predictions:
        metrics.write_predictions(args.predictions, preds)
    report = metrics.evaluate(preds, manifest.ground_truth())
    payload = report.to_dict()
    payload.update(_provenance(cfg))
    payload["checkpoint"] = str(args.checkpoint)
    _dump(payload, args.out)
    return EXIT_OK


def _read_crop_input(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise data_io.DataError(f"{path}: expected [H, W, C] or [T, H, W, C], got shape {arr.shape}")
        return arr.astype(np.float64)
    return data_io.decode_video(path)


def _read_candidates(path: str) -> list[tuple[int, int, int, int]]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise data_io.DataError(f"cannot read candidates from {path}: {exc}") from None
    boxes = payload["candidates"] if isinstance(payload, dict) else payload
    return [tuple(int(v) for v in b) for b in boxes]


def cmd_crop(args) -> int:
    cfg = _config(args)
    overrides = {}
    if args.spatial_exp_sign is not None:
        overrides["spatial_exp_sign"] = args.spatial_exp_sign
    if args.fag_mode is not None:
        overrides["fag_mode"] = args.fag_mode
    if args.head is not None:
        overrides["head_checkpoint"] = args.head
    if args.detector is not None:
        overrides["detector"] = args.detector
    overrides["candidates"] = args.candidates
    cfg = config_from_dict({**cfg.to_dict(), "crop": {**cfg.to_dict()["crop"], **overrides}})
    crop_cfg = cfg.crop

    path = Path(args.input)
    frames = _read_crop_input(path)
    pipeline.seed_everything(cfg.seed)
    net = pipeline.build_crop_net(crop_cfg)
    detector = pipeline.build_detector(crop_cfg)
    h, w = frames.shape[1:3]
    candidates = _read_candidates(args.candidates_file) if args.candidates == "file" else grid_candidates(w, h)
    if not candidates:
        raise CropError("no crop candidates")
    results = []
    for i, frame in enumerate(frames):
        best = select_best_crop(score_candidates(frame, candidates, detector, net, str(path)))
        results.append({"frame": i, "box": list(best.box), "score": best.score, "candidate_index": best.index})
    payload = {
        "box": results[0]["box"],
        "score": results[0]["score"],
        "frames": results,
        "input": str(path),
        "spatial_exp_sign": crop_cfg.spatial_exp_sign,
        "fag_mode": crop_cfg.fag_mode,
        **_provenance(cfg),
    }
    _dump(payload, args.out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = _config(args)
    manifest = data_io.load_manifest(args.manifest, (cfg.data.mos_min, cfg.data.mos_max), check_paths=False)
    manifest = manifest.split(args.split)
    report = metrics.evaluate(metrics.read_predictions(args.predictions), manifest.ground_truth())
    payload = report.to_dict()
    payload.update(_provenance(cfg))
    _dump(payload, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags go before or after the subcommand without the subparser resetting them
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--device", default=argparse.SUPPRESS, help="compute device (only 'cpu' is supported)")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="logging level (DEBUG, INFO, WARNING, ...)")

    parser = argparse.ArgumentParser(prog="aigcvqa", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a quality model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: train.out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="predict and score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, help="only evaluate entries with this split tag")
    p.add_argument("--config", default=None, help="optional config to compare against the checkpoint")
    p.add_argument("--predictions", default=None, help="also write JSON-lines predictions here")
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop", parents=[common], help="select the best crop for an image or video")
    p.add_argument("input")
    p.add_argument("--config", default=None)
    p.add_argument("--candidates", choices=("grid", "file"), default="grid")
    p.add_argument("--candidates-file", default=None)
    p.add_argument("--spatial-exp-sign", type=int, choices=(1, -1), default=None)
    p.add_argument("--fag-mode", choices=("hadamard", "projection"), default=None)
    p.add_argument("--detector", choices=("stub", "sidecar"), default=None)
    p.add_argument("--head", default=None, help="crop head state dict (default: fit on synthetic scenes)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("metrics", parents=[common], help="PLCC/SROCC/KROCC for a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("device", "cpu"), ("log_level", "WARNING")):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.device != "cpu":
        print(f"error: device {args.device!r} is not supported; use cpu", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "crop" and args.candidates == "file" and not args.candidates_file:
        print("error: --candidates file requires --candidates-file", file=sys.stderr)
        return EXIT_USAGE
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
