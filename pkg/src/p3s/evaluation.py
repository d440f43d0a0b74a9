"""Generation-quality metrics and the benchmark protocol around them.

Two embedding spaces score every class: the joint image-text encoder gives
subject fidelity (mean cosine of each generated image against the reference
set) and prompt alignment (cosine against the prompt embedding), and a
second pluggable feature encoder gives an independent fidelity score.  The
per-image fidelity spread is reported as a population variance alongside
each mean, so a method that nails one seed and misses the rest reads as
unstable rather than average.  Classes are independent and evaluated on a
thread pool; one reducer folds them into the aggregate row.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .backbone.base import BackboneBundle, to_float_image
from .errors import P3SError, ProtocolError
from .sampling import SampleRequest, generate
from .training import load_checkpoint

SCORE_FIELDS = ("clip_i", "clip_t", "dino", "clip_iv", "dino_v")

REFERENCE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def default_prompts() -> list:
    """Twenty-five generic photo contexts; `{}` takes the subject phrase."""
    return [
        "a photo of {}",
        "a photo of {} in the jungle",
        "a photo of {} in the snow",
        "a photo of {} on the beach",
        "a photo of {} on a cobblestone street",
        "a photo of {} on top of a wooden floor",
        "a photo of {} with a city in the background",
        "a photo of {} with a mountain in the background",
        "a photo of {} with a blue house in the background",
        "a photo of {} on top of a purple rug in a forest",
        "a photo of {} wearing a red hat",
        "a photo of {} wearing a santa hat",
        "a photo of {} wearing a rainbow scarf",
        "a photo of {} wearing a black top hat and a monocle",
        "a photo of {} in a chef outfit",
        "a photo of {} in a firefighter outfit",
        "a photo of {} in a police outfit",
        "a photo of {} wearing pink glasses",
        "a photo of {} wearing a yellow shirt",
        "a photo of {} in a purple wizard outfit",
        "a red {}",
        "a purple {}",
        "a shiny {}",
        "a wet {}",
        "a cube shaped {}",
    ]


def load_prompts(path: Path) -> list:
    """Read one prompt per line; blank lines and `#` comments are skipped."""
    lines = Path(path).read_text().splitlines()
    prompts = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
    if not prompts:
        raise ProtocolError(f"prompt file {path} contains no prompts")
    return prompts


@dataclass
class EvalProtocol:
    """What to generate and how to seed it, per subject class.

    Each class directory holds that subject's reference images.  Seeds are
    the same for every class (``base_seed``) and stride by
    ``images_per_prompt`` across prompts so no two generations share noise.
    """

    classes: list
    prompts: list = field(default_factory=default_prompts)
    images_per_prompt: int = 4
    base_seed: int = 0
    steps: int = 50
    guidance_scale: float = 7.5
    max_workers: int = 4

    def __post_init__(self):
        if not self.prompts:
            raise ProtocolError("protocol needs at least one prompt")
        if self.images_per_prompt < 1:
            raise ProtocolError("images_per_prompt must be >= 1")
        if self.steps < 1:
            raise ProtocolError("steps must be >= 1")
        if self.max_workers < 1:
            raise ProtocolError("max_workers must be >= 1")

    @property
    def images_per_class(self) -> int:
        return len(self.prompts) * self.images_per_prompt

    def prompt_seed(self, prompt_index: int) -> int:
        # disjoint seed blocks per prompt; generate() adds the image index
        return self.base_seed + prompt_index * self.images_per_prompt

    def to_json(self) -> dict:
        return {
            "classes": [str(c) for c in self.classes],
            "prompts": list(self.prompts),
            "images_per_prompt": self.images_per_prompt,
            "base_seed": self.base_seed,
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "max_workers": self.max_workers,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalProtocol":
        known = {f: payload[f] for f in (
            "classes", "prompts", "images_per_prompt", "base_seed",
            "steps", "guidance_scale", "max_workers") if f in payload}
        unknown = set(payload) - set(known)
        if unknown:
            raise ProtocolError(f"unknown protocol fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class ClassScores:
    clip_i: float
    clip_t: float
    dino: float
    clip_iv: float
    dino_v: float

    def __post_init__(self):
        for name in ("clip_i", "clip_t", "dino"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ProtocolError(f"{name}={v} outside [-1, 1]")
        for name in ("clip_iv", "dino_v"):
            if getattr(self, name) < 0.0:
                raise ProtocolError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in SCORE_FIELDS}


@dataclass
class ScoreTable:
    """Per-class metric rows plus their unweighted aggregate.

    Classes that could not be evaluated are listed in ``missing`` with a
    reason and excluded from the aggregate.
    """

    per_class: dict
    aggregate: Optional[ClassScores]
    missing: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_class": {name: s.as_dict() for name, s in sorted(self.per_class.items())},
            "aggregate": None if self.aggregate is None else self.aggregate.as_dict(),
            "missing": list(self.missing),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("class",) + SCORE_FIELDS)
        for name, s in sorted(self.per_class.items()):
            writer.writerow([name] + [repr(getattr(s, f)) for f in SCORE_FIELDS])
        if self.aggregate is not None:
            writer.writerow(["aggregate"] + [repr(getattr(self.aggregate, f)) for f in SCORE_FIELDS])
        return buf.getvalue()

    def write(self, out_dir: Path) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "scores.json"
        csv_path = out_dir / "scores.csv"
        json_path.write_text(json.dumps(self.to_json(), indent=2))
        csv_path.write_text(self.to_csv())
        return [json_path, csv_path]


def _embed(encoder, image: np.ndarray) -> np.ndarray:
    """Accept a callable, an embed_image carrier, or a global_feature one."""
    if callable(encoder) and not hasattr(encoder, "embed_image") and not hasattr(encoder, "global_feature"):
        vec = encoder(image)
    elif hasattr(encoder, "embed_image"):
        vec = encoder.embed_image(image)
    elif hasattr(encoder, "global_feature"):
        vec = encoder.global_feature(image)
    else:
        raise ProtocolError(f"{type(encoder).__name__} exposes no image embedding interface")
    return np.asarray(vec, dtype=np.float64).ravel()


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # rounding can push |cos| a hair past 1; keep scores in range
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def image_similarity(generated: Sequence, references: Sequence, encoder) -> tuple:
    """Mean and population variance of per-image fidelity scores.

    Each generated image scores as its mean cosine against every reference
    embedding; the variance is taken across generated images (ddof 0), so a
    single image always reports variance exactly 0.
    """
    gen = list(generated)
    refs = list(references)
    if not gen:
        raise ProtocolError("image_similarity: generated set is empty")
    if not refs:
        raise ProtocolError("image_similarity: reference set is empty")
    ref_vecs = [_embed(encoder, r) for r in refs]
    scores = []
    for img in gen:
        vec = _embed(encoder, img)
        scores.append(float(np.mean([_cosine(vec, rv) for rv in ref_vecs])))
    arr = np.asarray(scores, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


def text_alignment(generated: Sequence, prompt: str, joint_encoder) -> float:
    """Mean cosine between each image embedding and the prompt embedding."""
    gen = list(generated)
    if not gen:
        raise ProtocolError("text_alignment: generated set is empty")
    tvec = np.asarray(joint_encoder.embed_text(prompt), dtype=np.float64).ravel()
    scores = [_cosine(np.asarray(joint_encoder.embed_image(img), dtype=np.float64).ravel(), tvec)
              for img in gen]
    return float(np.mean(scores))


def load_reference_images(class_dir: Path) -> list:
    """All images in one subject directory, sorted by filename."""
    class_dir = Path(class_dir)
    if not class_dir.is_dir():
        raise ProtocolError(f"{class_dir} is not a directory")
    from PIL import Image

    images = []
    for p in sorted(class_dir.iterdir()):
        if p.suffix.lower() not in REFERENCE_EXTENSIONS:
            continue
        with Image.open(p) as im:
            images.append(to_float_image(np.asarray(im.convert("RGB"))))
    if not images:
        raise ProtocolError(f"{class_dir} contains no reference images")
    return images


def _subject_phrase(payload: dict) -> str:
    cfg = payload.get("train_config", {})
    identifier = cfg.get("identifier", payload.get("identifier", "sks"))
    noun = cfg.get("class_noun", "")
    return f"{identifier} {noun}".strip()


def _evaluate_class(
    protocol: EvalProtocol,
    class_dir: Path,
    checkpoint: Path,
    backbone: BackboneBundle,
    out_dir: Optional[Path],
) -> ClassScores:
    references = load_reference_images(class_dir)
    phrase = _subject_phrase(load_checkpoint(checkpoint))
    all_images = []
    text_scores = []
    for p_idx, template in enumerate(protocol.prompts):
        prompt = template.format(phrase)
        request = SampleRequest(
            prompt=prompt,
            checkpoint=str(checkpoint),
            seed=protocol.prompt_seed(p_idx),
            steps=protocol.steps,
            guidance_scale=protocol.guidance_scale,
            num_images=protocol.images_per_prompt,
        )
        prompt_dir = None if out_dir is None else Path(out_dir) / f"prompt_{p_idx:02d}"
        result = generate(request, backbone, out_dir=prompt_dir)
        all_images.extend(result.images)
        text_scores.append(text_alignment(result.images, prompt, backbone.joint_encoder))
    clip_i, clip_iv = image_similarity(all_images, references, backbone.joint_encoder)
    # the second fidelity space; fall back to the joint encoder when a
    # backbone ships without a dedicated feature slot
    feature = backbone.feature_encoder if backbone.feature_encoder is not None else backbone.joint_encoder
    dino, dino_v = image_similarity(all_images, references, feature)
    return ClassScores(
        clip_i=clip_i,
        clip_t=float(np.mean(text_scores)),
        dino=dino,
        clip_iv=clip_iv,
        dino_v=dino_v,
    )


def run_benchmark(
    protocol: EvalProtocol,
    checkpoints: Mapping,
    backbone: BackboneBundle,
    out_dir: Optional[Path] = None,
) -> ScoreTable:
    """Generate per the protocol and score every class.

    ``checkpoints`` maps class name (the reference directory's basename) to
    a checkpoint path.  A class with no usable checkpoint or references is
    reported under ``missing`` and left out of the aggregate, which is the
    unweighted mean over the classes that did run.
    """
    jobs = []
    missing = []
    for class_dir in protocol.classes:
        class_dir = Path(class_dir)
        name = class_dir.name
        ckpt = checkpoints.get(name)
        if ckpt is None:
            missing.append({"class": name, "reason": "no checkpoint provided"})
            continue
        ckpt = Path(ckpt)
        if not ckpt.is_file():
            missing.append({"class": name, "reason": f"checkpoint {ckpt} not found"})
            continue
        jobs.append((name, class_dir, ckpt))

    per_class = {}

    def run_one(job):
        name, class_dir, ckpt = job
        class_out = None if out_dir is None else Path(out_dir) / name
        return name, _evaluate_class(protocol, class_dir, ckpt, backbone, class_out)

    if jobs:
        with ThreadPoolExecutor(max_workers=min(protocol.max_workers, len(jobs))) as pool:
            futures = [(job[0], pool.submit(run_one, job)) for job in jobs]
            for name, fut in futures:
                try:
                    per_class[fut.result()[0]] = fut.result()[1]
                except P3SError as exc:
                    missing.append({"class": name, "reason": str(exc)})

    aggregate = None
    if per_class:
        aggregate = ClassScores(**{
            f: float(np.mean([getattr(s, f) for s in per_class.values()]))
            for f in SCORE_FIELDS
        })
    table = ScoreTable(per_class=per_class, aggregate=aggregate, missing=missing)
    if out_dir is not None:
        table.write(out_dir)
    return table
