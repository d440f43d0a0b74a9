"""Fine-tuning loop.

Trains the simplified copy, its zero projections, and the latent-fusion
weights jointly against denoising MSE plus the attention-consistency term,
while the original denoiser stays frozen.  Condition dropout replaces the
text encoding with the unconditional one AND skips injection for the same
sample, mirroring how classifier-free guidance contrasts the two passes at
inference.  All randomness flows through one seeded generator whose state
is checkpointed, so interrupted runs resume on the identical trajectory.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone.base import BackboneBundle, TextEncoding, to_float_image
from .errors import ConfigError, StageError, StateError
from .fusion import LatentFusion, SubjectInput, build_subject_input
from .injection import (
    InjectionConfig,
    LearnedWeightNet,
    SimplifiedCopy,
    WeightSchedule,
    denoise_joint,
    init_trainable_copy,
)
from .losses import LossReport, attention_consistency_loss, denoising_loss, select_map_pair, total_loss
from .masking import MaskConfig, PointAnnotation, load_annotation

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Everything a training run needs; JSON-serializable."""

    learning_rate: float = 1e-5
    epochs: int = 60
    max_grad_norm: float = 1.0
    condition_dropout: float = 0.10
    gamma: float = 0.1
    lam: float = 0.2
    seed: int = 0
    identifier: str = "sks"
    backbone: str = "toy"
    class_noun: str = "subject"
    prompt_template: str = "a photo of {identifier} {class_noun}"
    consistency_placement: str = "last"  # or "all"
    learned_schedule: bool = False
    inference_schedule: dict = field(default_factory=lambda: WeightSchedule().to_json())
    inpaint_seed: int = 0
    out_dir: str = "runs/train"
    data: list = field(default_factory=list)  # [{"image": path, "annotation": path}]

    def __post_init__(self):
        if not (0 <= self.condition_dropout < 1):
            raise ConfigError(f"condition_dropout {self.condition_dropout} outside [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.consistency_placement not in ("last", "all"):
            raise ConfigError(f"unknown consistency_placement '{self.consistency_placement}'")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "max_grad_norm": self.max_grad_norm,
            "condition_dropout": self.condition_dropout, "gamma": self.gamma,
            "lambda": self.lam, "seed": self.seed, "identifier": self.identifier,
            "backbone": self.backbone, "class_noun": self.class_noun,
            "prompt_template": self.prompt_template,
            "consistency_placement": self.consistency_placement,
            "learned_schedule": self.learned_schedule,
            "inference_schedule": self.inference_schedule,
            "inpaint_seed": self.inpaint_seed, "out_dir": self.out_dir, "data": self.data,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        known = {f: payload[f] for f in (
            "learning_rate", "epochs", "max_grad_norm", "condition_dropout", "gamma", "seed", "identifier",
            "backbone", "class_noun", "prompt_template", "consistency_placement",
            "learned_schedule", "inference_schedule", "inpaint_seed", "out_dir", "data",
        ) if f in payload}
        if "lambda" in payload:
            known["lam"] = payload["lambda"]
        unknown = set(payload) - set(known) - {"lambda"}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class TrainSample:
    """One reference image with its cached frozen-pipeline outputs."""

    image: np.ndarray
    annotation: PointAnnotation
    prompt: str
    subject_input: SubjectInput
    cond_encoding: TextEncoding

    def __post_init__(self):
        ident = self.annotation.identifier
        if self.prompt.split().count(ident) != 1:
            raise ConfigError(
                f"prompt '{self.prompt}' must contain identifier '{ident}' exactly once")


def prepare_training_set(
    images: list[np.ndarray],
    annotations: list[PointAnnotation],
    identifier: str,
    class_noun: str,
    backbone: BackboneBundle,
    mask_config: MaskConfig | None = None,
    inpaint_seed: int = 0,
    prompt_template: str = "a photo of {identifier} {class_noun}",
) -> list[TrainSample]:
    """Run the selection pipeline once per reference and cache its outputs.

    The fusion addend is NOT cached: its weights train, so the fused latent
    is recomputed from these caches at every step.
    """
    if len(images) != len(annotations):
        raise ConfigError(f"{len(images)} images vs {len(annotations)} annotations")
    if not (1 <= len(images) <= 7):
        raise ConfigError(f"expected 1-7 reference images, got {len(images)}")
    prompt = prompt_template.format(identifier=identifier, class_noun=class_noun)
    samples = []
    for i, (image, annotation) in enumerate(zip(images, annotations)):
        if annotation.identifier != identifier:
            annotation.identifier = identifier
        try:
            subject_input = build_subject_input(
                annotation, image, backbone, config=mask_config, inpaint_seed=inpaint_seed)
        except StageError as e:
            raise StageError(f"image[{i}]:{annotation.image_ref}:{e.stage}", e.cause) from e
        samples.append(TrainSample(
            image=to_float_image(image), annotation=annotation, prompt=prompt,
            subject_input=subject_input, cond_encoding=backbone.text_encoder.encode(prompt)))
    return samples


class TrainState:
    """Owns every mutable piece of one training run."""

    def __init__(self, config: TrainConfig, backbone: BackboneBundle, samples: list[TrainSample]):
        if not samples:
            raise ConfigError("training set is empty")
        self.config = config
        self.backbone = backbone
        self.samples = samples
        self.copy: SimplifiedCopy = init_trainable_copy(backbone.denoiser)
        c, h, w = samples[0].subject_input.inpainted_latent.data.shape
        ctx_dim = samples[0].subject_input.clip_hidden.embed_dim
        self.fusion = LatentFusion(c, ctx_dim, seed=config.seed)
        self.schedule_net: Optional[LearnedWeightNet] = (
            LearnedWeightNet(seed=config.seed) if config.learned_schedule else None)
        self.injection = InjectionConfig(lam=config.lam)
        params = list(self.copy.parameters()) + list(self.fusion.parameters())
        if self.schedule_net is not None:
            params += list(self.schedule_net.parameters())
        self.trainable_params = params
        self.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.epoch = 0
        self.dropout_draws = 0
        self.dropout_hits = 0
        # frozen-pipeline caches as tensors
        self._latents = [torch.as_tensor(s.subject_input.inpainted_latent.data, dtype=torch.float64)
                         for s in samples]
        self._contexts = [torch.as_tensor(s.subject_input.clip_hidden.token_sequence(),
                                          dtype=torch.float64) for s in samples]
        self._cond = [torch.as_tensor(s.cond_encoding.tokens, dtype=torch.float64) for s in samples]
        self._uncond = torch.as_tensor(backbone.text_encoder.encode("").tokens, dtype=torch.float64)
        self._train_weight = WeightSchedule(variant="fixed", fixed_value=1.0)

    def draw_dropout(self) -> bool:
        """One instrumented condition-dropout decision."""
        hit = bool(torch.rand(1, generator=self.rng).item() < self.config.condition_dropout)
        self.dropout_draws += 1
        self.dropout_hits += hit
        return hit

    @property
    def observed_dropout_rate(self) -> float:
        return self.dropout_hits / max(1, self.dropout_draws)


def train_step(state: TrainState, sample_index: int | None = None) -> LossReport:
    """One optimization step on one sample (batch size 1, few-shot regime)."""
    cfg = state.config
    i = state.step % len(state.samples) if sample_index is None else sample_index
    schedule = state.backbone.schedule
    t = int(torch.randint(1, schedule.timesteps + 1, (1,), generator=state.rng).item())
    x0 = state._latents[i]
    noise = torch.randn(x0.shape, generator=state.rng, dtype=torch.float64)
    x_t = schedule.add_noise(x0, noise, t)
    dropped = state.draw_dropout()

    state.optimizer.zero_grad()
    if dropped:
        result = denoise_joint(
            state.backbone.denoiser, None, x_t, t, state._uncond, None,
            InjectionConfig(lam=cfg.lam, enable=False), state._train_weight,
            schedule.timesteps)
        l_ac = torch.tensor(0.0, dtype=torch.float64)
    else:
        fused = state.fusion.fuse(x0, state._contexts[i])
        weight = None
        if state.schedule_net is not None:
            weight = state.schedule_net(
                torch.tensor([[t / schedule.timesteps]], dtype=torch.float64))[0, 0]
        result = denoise_joint(
            state.backbone.denoiser, state.copy, x_t, t, state._cond[i], fused,
            state.injection, state._train_weight, schedule.timesteps,
            weight_override=weight)
        pair = select_map_pair(result.copy_cross_maps, result.original_cross_maps,
                               cfg.consistency_placement)
        l_ac = attention_consistency_loss(pair)
    l_ldm = denoising_loss(result.noise_pred, noise)
    loss = l_ldm + cfg.gamma * l_ac
    if not torch.isfinite(loss):
        raise StateError(
            f"non-finite loss at step {state.step}: t={t}, "
            f"l_ldm={float(l_ldm)}, l_ac={float(l_ac)}, dropped={dropped}")
    # a dropped sample bypasses every trainable module, so there is nothing
    # to differentiate; the step still counts and is logged
    if loss.requires_grad:
        loss.backward()
        torch.nn.utils.clip_grad_norm_(state.trainable_params, cfg.max_grad_norm)
        state.optimizer.step()
    state.step += 1
    return total_loss(float(l_ldm.detach()), float(l_ac.detach()), cfg.gamma)


def save_checkpoint(state: TrainState, path: Path, include_resume: bool = False) -> Path:
    """Write the injection-module checkpoint format (versioned)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = state.samples[0]
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "p3s-checkpoint",
        "backbone_hash": state.backbone.content_hash(),
        "copy_state": state.copy.state_dict(),
        "fusion_state": state.fusion.state_dict(),
        "fusion_dims": [state.fusion.latent_channels, state.fusion.context_dim],
        "schedule": state.config.inference_schedule,
        "schedule_net_state": None if state.schedule_net is None else state.schedule_net.state_dict(),
        "injection": state.injection.to_json(),
        "identifier": state.config.identifier,
        "prompt": first.prompt,
        "cached_latent": first.subject_input.inpainted_latent.data,
        "cached_context": first.subject_input.clip_hidden.token_sequence(),
        "train_config": state.config.to_json(),
        "epoch": state.epoch,
        "step": state.step,
    }
    if include_resume:
        payload["optimizer_state"] = state.optimizer.state_dict()
        payload["rng_state"] = state.rng.get_state()
        payload["counters"] = {"draws": state.dropout_draws, "hits": state.dropout_hits}
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint file '{path}' not found")
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "p3s-checkpoint":
        raise ConfigError(f"{path} is not a checkpoint file")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format {payload.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    return payload


def restore_state(state: TrainState, payload: dict):
    """Load a resume checkpoint into a freshly built TrainState."""
    state.copy.load_state_dict(payload["copy_state"])
    state.fusion.load_state_dict(payload["fusion_state"])
    if payload.get("schedule_net_state") is not None:
        if state.schedule_net is None:
            state.schedule_net = LearnedWeightNet(seed=state.config.seed)
        state.schedule_net.load_state_dict(payload["schedule_net_state"])
    if "optimizer_state" not in payload:
        raise ConfigError("checkpoint has no optimizer state; cannot resume from it")
    state.optimizer.load_state_dict(payload["optimizer_state"])
    state.rng.set_state(payload["rng_state"])
    state.dropout_draws = payload["counters"]["draws"]
    state.dropout_hits = payload["counters"]["hits"]
    state.epoch = payload["epoch"]
    state.step = payload["step"]


def fine_tune(
    config: TrainConfig,
    backbone: BackboneBundle,
    samples: list[TrainSample] | None = None,
    resume_from: Path | None = None,
    progress_cb: Optional[Callable[[float], None]] = None,
) -> Path:
    """Full training run; returns the final checkpoint path.

    Per-epoch checkpoints with optimizer and RNG state land next to the
    final one, so a killed run restarts from the last epoch and walks the
    identical trajectory.
    """
    if samples is None:
        samples = _samples_from_config(config, backbone)
    state = TrainState(config, backbone, samples)
    hash_before = state.backbone.content_hash()
    if resume_from is not None:
        restore_state(state, load_checkpoint(resume_from))
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    last: Optional[LossReport] = None
    total_epochs = config.epochs
    with open(metrics_path, mode) as metrics:
        for epoch in range(state.epoch, total_epochs):
            state.epoch = epoch
            for _ in range(len(samples)):
                report = train_step(state)
                last = report
                metrics.write(json.dumps({
                    "step": state.step, "epoch": epoch,
                    "l_ldm": report.l_ldm, "l_ac": report.l_ac, "total": report.total,
                    "w_t": 1.0, "lr": config.learning_rate,
                }) + "\n")
            state.epoch = epoch + 1
            save_checkpoint(state, out_dir / f"epoch_{epoch + 1:04d}.pt", include_resume=True)
            if progress_cb is not None:
                progress_cb((epoch + 1) / total_epochs)
    if state.backbone.content_hash() != hash_before:
        raise StateError("frozen components changed during training; aborting")
    final = save_checkpoint(state, out_dir / "checkpoint_final.pt", include_resume=True)
    if last is not None:
        with open(out_dir / "summary.json", "w") as f:
            json.dump({"final": last.to_json(), "steps": state.step,
                       "observed_dropout": state.observed_dropout_rate}, f, indent=2)
    return final


def _samples_from_config(config: TrainConfig, backbone: BackboneBundle) -> list[TrainSample]:
    if not config.data:
        raise ConfigError("config.data lists no image/annotation pairs")
    from PIL import Image

    images, annotations = [], []
    for entry in config.data:
        if "image" not in entry or "annotation" not in entry:
            raise ConfigError(f"data entry {entry} needs 'image' and 'annotation' paths")
        images.append(np.asarray(Image.open(entry["image"]).convert("RGB")))
        annotations.append(load_annotation(Path(entry["annotation"])))
    return prepare_training_set(
        images, annotations, config.identifier, config.class_noun, backbone,
        inpaint_seed=config.inpaint_seed, prompt_template=config.prompt_template)
