"""Deterministic DDIM sampling with scheduled feature injection.

The conditional branch runs the frozen denoiser jointly with the trained
copy; the unconditional branch always runs the frozen denoiser alone, so
classifier-free guidance never mixes injected and plain predictions on the
same side.  A zero control weight makes the whole run bit-identical to a
plain guided sampler.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone.base import BackboneBundle, DiffusionSchedule, LatentImage, to_float_image
from .errors import CompatibilityError, DimensionError, ParameterError, StateError
from .fusion import LatentFusion
from .injection import (
    InjectionConfig,
    LearnedWeightNet,
    SimplifiedCopy,
    WeightSchedule,
    denoise_joint,
    init_trainable_copy,
    schedule_weight,
)
from .training import load_checkpoint

MANIFEST_SCHEMA_VERSION = 1


@dataclass
class SampleRequest:
    """One generation job: prompt, trained checkpoint, sampler knobs."""

    prompt: str
    checkpoint: str
    seed: int = 0
    steps: int = 50
    guidance_scale: float = 7.5
    num_images: int = 1
    # None means "use the schedule stored in the checkpoint"
    schedule: Optional[dict] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.num_images < 1:
            raise ParameterError("num_images must be >= 1")
        if not np.isfinite(self.guidance_scale):
            raise ParameterError("guidance_scale must be finite")
        if not self.prompt.strip():
            raise ParameterError("prompt must not be empty")

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt, "checkpoint": self.checkpoint, "seed": self.seed,
            "steps": self.steps, "guidance_scale": self.guidance_scale,
            "num_images": self.num_images, "schedule": self.schedule,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SampleRequest":
        known = {f: payload[f] for f in (
            "prompt", "checkpoint", "seed", "steps", "guidance_scale",
            "num_images", "schedule") if f in payload}
        unknown = set(payload) - set(known)
        if unknown:
            raise ParameterError(f"unknown sample request fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class GenerationResult:
    images: list  # float arrays (H, W, 3) in [0, 1]
    manifest: dict
    paths: list = field(default_factory=list)


def timestep_boundaries(total_steps: int, steps: int) -> list[tuple[int, int]]:
    """Evenly spaced timestep pairs (t, t_prev) from T down to 0.

    The grid is linspace(T, 0, steps + 1) rounded to integers; each sampler
    step consumes one adjacent pair.  When steps exceeds T, neighbouring
    boundaries collide and the collided pairs become identity steps.
    """
    if total_steps < 1:
        raise ParameterError("total_steps must be >= 1")
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    grid = np.linspace(total_steps, 0, steps + 1)
    bounds = [int(round(b)) for b in grid]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """One deterministic reverse step from t to t_prev."""
    if not (0 <= t_prev <= t <= schedule.timesteps):
        raise ParameterError(
            f"bad timestep pair (t={t}, t_prev={t_prev}) for T={schedule.timesteps}")
    if t_prev == t:
        return x_t
    if eps_hat.shape != x_t.shape:
        raise DimensionError(
            f"noise prediction {tuple(eps_hat.shape)} != latent {tuple(x_t.shape)}")
    a_t = schedule.alphas_cumprod[t]
    a_prev = schedule.alphas_cumprod[t_prev]
    x0_pred = (x_t - (1.0 - a_t) ** 0.5 * eps_hat) / a_t**0.5
    return a_prev**0.5 * x0_pred + (1.0 - a_prev) ** 0.5 * eps_hat


def cfg_combine(uncond: torch.Tensor, cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided prediction: unconditional plus scaled conditional offset."""
    if uncond.shape != cond.shape:
        raise DimensionError(
            f"guidance branches disagree: {tuple(uncond.shape)} vs {tuple(cond.shape)}")
    return uncond + scale * (cond - uncond)


def _restore_modules(payload: dict, backbone: BackboneBundle):
    """Rebuild the trained copy, fusion module, and schedule from a checkpoint."""
    if payload["backbone_hash"] != backbone.content_hash():
        raise CompatibilityError(
            "checkpoint was trained against a different backbone "
            f"({payload['backbone_hash'][:12]} != {backbone.content_hash()[:12]})")
    copy = init_trainable_copy(backbone.denoiser)
    copy.load_state_dict(payload["copy_state"])
    lat_c, ctx_d = payload["fusion_dims"]
    fusion = LatentFusion(lat_c, ctx_d)
    fusion.load_state_dict(payload["fusion_state"])
    schedule = WeightSchedule.from_json(payload["schedule"])
    if schedule.variant == "learned":
        if payload.get("schedule_net_state") is None:
            raise StateError("checkpoint has a learned schedule but no weight net")
        net = LearnedWeightNet()
        net.load_state_dict(payload["schedule_net_state"])
        schedule.net = net
    injection = InjectionConfig.from_json(payload["injection"])
    return copy, fusion, schedule, injection


def _fused_subject_latent(fusion: LatentFusion, payload: dict) -> torch.Tensor:
    latent = torch.as_tensor(payload["cached_latent"], dtype=torch.float64)
    context = torch.as_tensor(payload["cached_context"], dtype=torch.float64)
    with torch.no_grad():
        return fusion.fuse(latent, context)


def _checkpoint_file_hash(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate(
    request: SampleRequest,
    backbone: BackboneBundle,
    out_dir: Optional[Path] = None,
) -> GenerationResult:
    """Run the guided sampler with the trained modules from a checkpoint.

    Every image gets its own derived seed (request seed + image index) and
    the manifest records the full per-step control-weight trace, so a rerun
    with the same request reproduces the output byte for byte.
    """
    payload = load_checkpoint(Path(request.checkpoint))
    copy, fusion, schedule, injection = _restore_modules(payload, backbone)
    if request.schedule is not None:
        override = WeightSchedule.from_json(request.schedule)
        if override.variant == "learned":
            if payload.get("schedule_net_state") is None:
                raise StateError("requested a learned schedule but the checkpoint has no weight net")
            net = LearnedWeightNet()
            net.load_state_dict(payload["schedule_net_state"])
            override.net = net
        schedule = override
    subject_latent = _fused_subject_latent(fusion, payload)

    cond = backbone.text_encoder.encode(request.prompt)
    uncond = backbone.text_encoder.encode("")
    diff = backbone.schedule
    pairs = timestep_boundaries(diff.timesteps, request.steps)
    step_trace = [
        {"t": t, "weight": schedule_weight(t, diff.timesteps, schedule)}
        for t, _ in pairs
    ]

    images = []
    for idx in range(request.num_images):
        gen = torch.Generator().manual_seed(request.seed + idx)
        x = torch.randn(subject_latent.shape, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            for step_idx, (t, t_prev) in enumerate(pairs):
                res_c = denoise_joint(
                    backbone.denoiser, copy, x, t, cond, subject_latent,
                    injection, schedule, diff.timesteps)
                res_u = denoise_joint(
                    backbone.denoiser, None, x, t, uncond, None,
                    InjectionConfig(enable=False), schedule, diff.timesteps)
                eps = cfg_combine(res_u.noise_pred, res_c.noise_pred, request.guidance_scale)
                x = ddim_step(x, eps, t, t_prev, diff)
                if not torch.isfinite(x).all():
                    raise StateError(
                        f"non-finite latent at sampler step {step_idx} (t={t}) "
                        f"for image {idx}")
        decoded = backbone.codec.decode(LatentImage(data=x.numpy(), scale_info=backbone.codec.scale))
        images.append(np.clip(decoded, 0.0, 1.0))

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "request": request.to_json(),
        "seeds": [request.seed + i for i in range(request.num_images)],
        "schedule": schedule.to_json(),
        "steps": step_trace,
        "timestep_convention": "boundaries linspace(T, 0, steps+1) rounded; "
                               "each step consumes one adjacent pair",
        "checkpoint_hash": _checkpoint_file_hash(request.checkpoint),
        "backbone_hash": backbone.content_hash(),
        "identifier": payload["identifier"],
    }

    paths = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        from PIL import Image

        for i, img in enumerate(images):
            p = out_dir / f"sample_{i:03d}.png"
            Image.fromarray((img * 255).round().astype(np.uint8)).save(p)
            paths.append(p)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return GenerationResult(images=images, manifest=manifest, paths=paths)


def generate_baseline(
    backbone: BackboneBundle,
    prompt: str,
    seed: int = 0,
    steps: int = 50,
    guidance_scale: float = 7.5,
    latent_shape: Optional[tuple] = None,
) -> np.ndarray:
    """Plain guided DDIM with the frozen denoiser only; the no-injection
    reference the scheduled sampler must match bit for bit at weight zero."""
    cond = backbone.text_encoder.encode(prompt)
    uncond = backbone.text_encoder.encode("")
    diff = backbone.schedule
    if latent_shape is None:
        latent_shape = (backbone.codec.channels, 8, 8)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(latent_shape, generator=gen, dtype=torch.float64)
    cond_ctx = torch.as_tensor(cond.tokens, dtype=torch.float64)
    uncond_ctx = torch.as_tensor(uncond.tokens, dtype=torch.float64)
    with torch.no_grad():
        for t, t_prev in timestep_boundaries(diff.timesteps, steps):
            eps_c, _ = backbone.denoiser(x, t, cond_ctx)
            eps_u, _ = backbone.denoiser(x, t, uncond_ctx)
            eps = cfg_combine(eps_u, eps_c, guidance_scale)
            x = ddim_step(x, eps, t, t_prev, diff)
    decoded = backbone.codec.decode(LatentImage(data=x.numpy(), scale_info=backbone.codec.scale))
    return np.clip(decoded, 0.0, 1.0)
