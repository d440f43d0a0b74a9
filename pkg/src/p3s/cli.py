"""Command-line entry points.

Every command reads one JSON config file, runs the corresponding module end
to end, prints a result JSON on stdout and exits 0.  Failures print a
machine-readable error object ({"error": {"code", "message"}}) and exit 1,
so scripts can branch on the code without parsing prose.  Progress goes to
stderr through logging and never mixes into the stdout payload.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import build_backbone
from .errors import ConfigError, P3SError
from .evaluation import EvalProtocol, run_benchmark
from .masking import (
    MaskConfig,
    PointAnnotation,
    extract_negative_mask,
    load_annotation,
    save_mask_artifacts,
)
from .sampling import SampleRequest, generate
from .training import TrainConfig, fine_tune

log = logging.getLogger("p3s")


def _load_config(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from None


def _build_backbone(name: str, toy_flag: bool):
    if toy_flag:
        name = "toy"
    try:
        return build_backbone(name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise ConfigError(f"image file '{path}' not found") from None


def cmd_mask_preview(config: dict, toy_flag: bool) -> dict:
    """Point annotation to mask artifacts: 1-bit PNG, overlay, sidecar JSON."""
    if "image" not in config:
        raise ConfigError("mask-preview config needs an 'image' path")
    image = _load_image(config["image"])
    if "annotation" in config:
        annotation = load_annotation(Path(config["annotation"]))
    elif "positive" in config:
        pos = config["positive"]
        neg = config.get("negative")
        annotation = PointAnnotation(
            image_ref=config["image"],
            positive=(int(pos["x"]), int(pos["y"])),
            negative=None if neg is None else (int(neg["x"]), int(neg["y"])),
            image_dims=image.shape[:2],
        )
    else:
        raise ConfigError("mask-preview config needs 'annotation' or 'positive'/'negative' points")
    params = config.get("params", {})
    known = {f: params[f] for f in (
        "sigma", "truncate", "otsu_bins", "dilation_patches",
        "polarity", "inpaint_prompt") if f in params}
    unknown = set(params) - set(known)
    if unknown:
        raise ConfigError(f"unknown mask params: {sorted(unknown)}")
    mask_config = MaskConfig(**known)
    backbone = _build_backbone(config.get("backbone", "toy"), toy_flag)
    enc = backbone.patch_encoder.encode(image)
    extraction = extract_negative_mask(annotation, enc, mask_config)
    out_dir = Path(config.get("out_dir", "runs/mask"))
    sidecar = save_mask_artifacts(
        extraction, annotation, mask_config, out_dir,
        stem=config.get("stem", "mask"), image=image)
    for note in extraction.warnings:
        log.info("mask-preview: %s", note)
    return {
        "out_dir": str(out_dir),
        "mask_file": sidecar["mask_file"],
        "overlay_file": sidecar.get("overlay_file"),
        "single_subject": extraction.single_subject,
        "warnings": extraction.warnings,
    }


def cmd_train(config: dict, toy_flag: bool) -> dict:
    """Full fine-tuning run; returns the final checkpoint path."""
    cfg = TrainConfig.from_json(config)
    backbone = _build_backbone(cfg.backbone, toy_flag)
    last = {"epoch": 0}

    def progress(frac: float):
        epoch = round(frac * cfg.epochs)
        if epoch != last["epoch"]:
            last["epoch"] = epoch
            log.info("train: epoch %d/%d", epoch, cfg.epochs)

    checkpoint = fine_tune(cfg, backbone, progress_cb=progress)
    return {"checkpoint": str(checkpoint), "out_dir": cfg.out_dir}


def cmd_generate(config: dict, toy_flag: bool) -> dict:
    """Sample images from a trained checkpoint and write them as PNGs."""
    backbone_name = config.pop("backbone", "toy")
    out_dir = Path(config.pop("out_dir", "runs/generate"))
    request = SampleRequest.from_json(config)
    backbone = _build_backbone(backbone_name, toy_flag)
    result = generate(request, backbone, out_dir=out_dir)
    log.info("generate: %d images under %s", len(result.images), out_dir)
    return {"out_dir": str(out_dir), "files": [str(p) for p in result.paths],
            "seeds": result.manifest["seeds"]}


def cmd_evaluate(config: dict, toy_flag: bool) -> dict:
    """Benchmark every class and write the score table."""
    if "protocol" not in config:
        raise ConfigError("evaluate config needs a 'protocol' object")
    protocol = EvalProtocol.from_json(config["protocol"])
    checkpoints = {k: Path(v) for k, v in config.get("checkpoints", {}).items()}
    backbone = _build_backbone(config.get("backbone", "toy"), toy_flag)
    out_dir = Path(config.get("out_dir", "runs/evaluate"))
    table = run_benchmark(protocol, checkpoints, backbone, out_dir=out_dir)
    for entry in table.missing:
        log.warning("evaluate: class %s skipped (%s)", entry["class"], entry["reason"])
    return {"out_dir": str(out_dir), "table": table.to_json()}


def cmd_serve(config: dict, toy_flag: bool) -> dict:
    """Run the HTTP service until interrupted (config > env > default)."""
    import uvicorn

    from .service import create_app

    port = int(config.get("port", os.environ.get("P3S_PORT", 8343)))
    asset_root = Path(config.get("asset_root", os.environ.get("P3S_ASSET_ROOT", "assets")))
    backbone = _build_backbone(config.get("backbone", "toy"), toy_flag)
    app = create_app(backbone, asset_root=asset_root)
    log.info("serve: http://127.0.0.1:%d (assets: %s)", port, asset_root)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    return {"port": port, "asset_root": str(asset_root)}


COMMANDS = {
    "mask-preview": cmd_mask_preview,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p3s",
        description="Point-supervised subject selection and subject-driven generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", required=name != "serve",
                       help="path to the JSON config for this command")
        p.add_argument("--toy-backbone", action="store_true",
                       help="force the self-contained toy backbone")
        p.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s")
    try:
        config = _load_config(args.config) if args.config else {}
        result = COMMANDS[args.command](config, args.toy_backbone)
    except P3SError as exc:
        json.dump({"error": {"code": exc.code, "message": str(exc)}}, sys.stdout)
        print()
        return 1
    json.dump(result, sys.stdout, indent=2)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
