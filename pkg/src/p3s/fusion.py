"""Subject-latent fusion.

Builds the conditioned latent the trainable copy consumes: the inpainted
reference image is encoded to a latent, flattened to tokens, and augmented
by single-head cross-attention against the image encoder's token sequence.
The query path runs through a zero-initialized per-token projection, so at
initialization the queries are zero, the attention is uniform, and the
addend is the mean value row broadcast everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone.base import BackboneBundle, LatentImage, PatchEncoding, to_float_image
from .errors import DimensionError, StageError
from .masking import MaskConfig, MaskExtraction, PointAnnotation, extract_negative_mask, save_mask_artifacts


@dataclass
class SubjectLatent:
    """Fused latent input of the trainable copy, with audit provenance."""

    data: np.ndarray
    provenance: tuple[str, int]  # (annotation id, inpaint seed)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise DimensionError("subject latent contains non-finite entries")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class LatentFusion(nn.Module):
    """Trainable cross-attention addend over latent tokens.

    The zero projection plays the same role as a zero convolution: with its
    weight and bias at zero the query side contributes nothing informative,
    which pins down the module's output at training start.
    """

    def __init__(self, latent_channels: int, context_dim: int, seed: int = 0):
        super().__init__()
        self.latent_channels = latent_channels
        self.context_dim = context_dim
        self.zero_proj = nn.Linear(latent_channels, latent_channels)
        self.to_q = nn.Linear(latent_channels, latent_channels, bias=False)
        self.to_k = nn.Linear(context_dim, latent_channels, bias=False)
        self.to_v = nn.Linear(context_dim, latent_channels, bias=False)
        gen = torch.Generator().manual_seed(seed)
        for m in (self.to_q, self.to_k, self.to_v):
            bound = 1.0 / math.sqrt(m.weight.shape[1])
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
        nn.init.zeros_(self.zero_proj.weight)
        nn.init.zeros_(self.zero_proj.bias)
        self.to(torch.float64)

    def addend(self, latent_tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Cross-attention output for (n, C) latent tokens vs (m, D) context."""
        if latent_tokens.shape[1] != self.latent_channels:
            raise DimensionError(
                f"latent has {latent_tokens.shape[1]} channels, fusion expects {self.latent_channels}")
        if context.shape[1] != self.context_dim:
            raise DimensionError(
                f"context dim {context.shape[1]} != fusion context dim {self.context_dim}")
        q = self.to_q(self.zero_proj(latent_tokens))
        k = self.to_k(context)
        v = self.to_v(context)
        logits = q @ k.T / math.sqrt(self.latent_channels)
        return torch.softmax(logits, dim=-1) @ v

    def fuse(self, latent: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Differentiable fusion of a (C, h, w) latent with (m, D) context tokens."""
        c, h, w = latent.shape
        tokens = latent.reshape(c, h * w).T
        fused = tokens + self.addend(tokens, context)
        return fused.T.reshape(c, h, w)


def fuse_subject_latent(
    inpainted_latent: LatentImage,
    clip_hidden: PatchEncoding,
    fusion: LatentFusion,
    provenance: tuple[str, int] = ("", 0),
) -> SubjectLatent:
    """Deterministic (no-grad) fusion producing the copy's latent input."""
    with torch.no_grad():
        fused = fusion.fuse(
            torch.as_tensor(inpainted_latent.data, dtype=torch.float64),
            torch.as_tensor(clip_hidden.token_sequence(), dtype=torch.float64),
        )
    return SubjectLatent(data=fused.numpy(), provenance=provenance)


@dataclass
class SubjectInput:
    """Output bundle of the reference-preparation pipeline."""

    inpainted_image: np.ndarray  # float64 (H, W, 3) in [0, 1]
    subject_latent: SubjectLatent
    pixel_mask: "np.ndarray"
    extraction: MaskExtraction
    clip_hidden: PatchEncoding
    inpainted_latent: LatentImage


def build_subject_input(
    annotation: PointAnnotation,
    image: np.ndarray,
    backbone: BackboneBundle,
    config: MaskConfig | None = None,
    fusion: LatentFusion | None = None,
    inpaint_seed: int = 0,
    out_dir: Optional[Path] = None,
) -> SubjectInput:
    """Chain mask extraction, inpainting, latent encoding and fusion.

    Any stage failure is re-raised tagged with the stage name.  When
    ``out_dir`` is given the mask artifacts and inpainted image are written
    there for audit.
    """
    cfg = config or MaskConfig()
    try:
        extraction = extract_negative_mask(annotation, backbone.patch_encoder.encode(image), cfg)
    except Exception as e:
        raise StageError("mask", e) from e
    try:
        if extraction.pixel_mask.empty:
            inpainted = to_float_image(image).copy()
        else:
            inpainted = backbone.inpainter.inpaint(
                image, extraction.pixel_mask.bits, prompt=cfg.inpaint_prompt, seed=inpaint_seed)
    except Exception as e:
        raise StageError("inpaint", e) from e
    try:
        latent = backbone.codec.encode(inpainted)
        clip_hidden = backbone.patch_encoder.encode(inpainted)
    except Exception as e:
        raise StageError("encode", e) from e
    try:
        if fusion is None:
            fusion = LatentFusion(latent.data.shape[0], clip_hidden.embed_dim)
        subject_latent = fuse_subject_latent(
            latent, clip_hidden, fusion, provenance=(annotation.image_ref, inpaint_seed))
    except Exception as e:
        raise StageError("fuse", e) from e
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_mask_artifacts(extraction, annotation, cfg, out_dir, image=image)
        from PIL import Image

        Image.fromarray((inpainted * 255).round().astype(np.uint8)).save(out_dir / "inpainted.png")
        with open(out_dir / "subject_input.json", "w") as f:
            json.dump({"annotation": annotation.to_json(), "inpaint_seed": inpaint_seed,
                       "latent_shape": list(subject_latent.shape)}, f, indent=2)
    return SubjectInput(
        inpainted_image=inpainted,
        subject_latent=subject_latent,
        pixel_mask=extraction.pixel_mask.bits,
        extraction=extraction,
        clip_hidden=clip_hidden,
        inpainted_latent=latent,
    )
