"""Benchmark the toy pipeline over a small synthetic class set.

Builds N two-blob classes, fine-tunes one checkpoint per class on its
single reference, then scores every class with the evaluation protocol and
prints the table.  Meant as a template for wiring real backbones into the
same protocol, and as a smoke test that the whole loop holds together.
"""

import argparse
import json
import logging
from pathlib import Path

from PIL import Image

from p3s.backbone import build_backbone
from p3s.backbone.toy import ToyBackboneConfig
from p3s.evaluation import EvalProtocol, run_benchmark
from p3s.synthetic import make_two_blob_scene
from p3s.training import TrainConfig, fine_tune

log = logging.getLogger("toy_benchmark")


def save_png(image, path: Path):
    Image.fromarray((image * 255).round().astype("uint8")).save(path)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/toy_benchmark"))
    parser.add_argument("--classes", type=int, default=2)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--steps", type=int, default=25, help="sampler steps")
    parser.add_argument("--images-per-prompt", type=int, default=2)
    parser.add_argument("--prompts", type=Path, default=None,
                        help="prompt file, one template per line ({} = subject)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    backbone = build_backbone("toy", ToyBackboneConfig(grid_size=8))
    bench_root = args.out / "classes"
    checkpoints = {}
    class_dirs = []
    for idx in range(args.classes):
        name = f"scene_{idx:02d}"
        scene = make_two_blob_scene(seed=idx)
        class_dir = bench_root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        class_dirs.append(class_dir)
        # the positive blob rendered alone is the reference set
        save_png(scene.single_blob_image("a"), class_dir / "ref_0.png")

        image_path = args.out / "train" / name / "reference.png"
        image_path.parent.mkdir(parents=True, exist_ok=True)
        save_png(scene.image, image_path)
        ann_path = image_path.with_suffix(".json")
        ann_path.write_text(json.dumps(scene.annotation.to_json()))
        config = TrainConfig(
            epochs=args.epochs,
            learning_rate=1e-2,
            seed=idx,
            out_dir=str(args.out / "train" / name),
            data=[{"image": str(image_path), "annotation": str(ann_path)}],
        )
        log.info("training %s (%d epochs)", name, args.epochs)
        checkpoints[name] = fine_tune(config, backbone)

    prompts = None
    if args.prompts is not None:
        from p3s.evaluation import load_prompts

        prompts = load_prompts(args.prompts)
    protocol = EvalProtocol(
        classes=class_dirs,
        prompts=prompts or ["a photo of {}", "a photo of {} in the snow"],
        images_per_prompt=args.images_per_prompt,
        steps=args.steps,
        guidance_scale=1.0,
        max_workers=2,
    )
    table = run_benchmark(protocol, checkpoints, backbone, out_dir=args.out / "scores")
    print(table.to_csv())
    log.info("score table under %s", args.out / "scores")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
