"""Shared backbone types, the diffusion schedule, content hashing and asset manifests.

A backbone bundles five pretrained components behind plain duck-typed
objects: a patch image encoder, a text encoder, a latent codec, a denoising
network with attention taps, and an inpainting engine.  The toy bundle in
``p3s.backbone.toy`` implements all of them deterministically on CPU; an
adapter for a real latent-diffusion stack can be registered under its own
name and loaded from an asset manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..errors import CompatibilityError, DimensionError, InputError


@dataclass
class PatchEncoding:
    """G x G grid of patch embeddings plus a global token.

    ``grid`` has shape (G, G, D); ``global_token`` has shape (D,).
    ``source_dims`` records the (H, W) pixel dims the encoding came from.
    """

    grid: np.ndarray
    global_token: np.ndarray
    source_dims: tuple[int, int]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.global_token = np.asarray(self.global_token, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise DimensionError(f"patch grid must be (G, G, D), got {self.grid.shape}")
        if self.grid.shape[0] < 2:
            raise DimensionError("patch grid requires G >= 2")
        if not np.all(np.isfinite(self.grid)) or not np.all(np.isfinite(self.global_token)):
            raise InputError("patch encoding contains non-finite entries")

    @property
    def grid_size(self) -> int:
        return self.grid.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.grid.shape[2]

    def token_sequence(self) -> np.ndarray:
        """Global token followed by the G*G patch tokens, shape (G*G + 1, D)."""
        flat = self.grid.reshape(-1, self.embed_dim)
        return np.concatenate([self.global_token[None, :], flat], axis=0)


@dataclass
class TextEncoding:
    """Token embeddings for one prompt.

    ``identifier_span`` is the half-open token index range of the subject
    identifier when the prompt contains it, else None.  ``truncated`` is set
    when the prompt exceeded the encoder's token limit.
    """

    tokens: np.ndarray
    prompt_text: str
    identifier_span: Optional[tuple[int, int]] = None
    truncated: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise DimensionError(f"text tokens must be (n, D), got {self.tokens.shape}")
        if self.identifier_span is not None:
            lo, hi = self.identifier_span
            if not (0 <= lo < hi <= self.tokens.shape[0]):
                raise InputError(f"identifier span {self.identifier_span} outside token sequence")


@dataclass
class LatentImage:
    """A (C, h, w) latent array plus the pixel-to-latent downscale factor."""

    data: np.ndarray
    scale_info: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"latent must be (C, h, w), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError("latent contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class DenoiserTaps:
    """Hidden states tapped from one denoiser forward pass.

    ``self_attention_hiddens`` lists each self-attention layer's token-form
    hidden state in network depth order.  ``cross_attention_maps`` lists the
    head-averaged, row-stochastic cross-attention maps in the same order.
    """

    self_attention_hiddens: list = field(default_factory=list)
    cross_attention_maps: list = field(default_factory=list)

    @property
    def last_cross_attention_map(self) -> torch.Tensor:
        if not self.cross_attention_maps:
            raise IndexError("no cross-attention maps were tapped")
        return self.cross_attention_maps[-1]


@dataclass
class DiffusionSchedule:
    """Linear-beta forward-process schedule.

    ``alphas_cumprod[t]`` is the signal fraction at step t, with the
    convention alphas_cumprod[0] = 1 (clean image) and t running 1..T.
    """

    timesteps: int
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.timesteps < 1:
            raise InputError("schedule needs timesteps >= 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.alphas_cumprod = torch.from_numpy(abar)

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        abar = self.alphas_cumprod[t]
        return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def to_float_image(image: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) array to the float64 [0, 1] channel convention."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {arr.shape}")
    if not np.all(np.isfinite(arr.astype(np.float64))):
        raise InputError("image contains non-finite pixels")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("float image values must lie in [0, 1]")
    return arr


def array_content_hash(*arrays: np.ndarray) -> str:
    """SHA-256 over the canonical float64 bytes of one or more arrays."""
    h = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def module_content_hash(module: torch.nn.Module) -> str:
    """SHA-256 over a torch module's parameters and buffers, order-canonical."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().to(torch.float64).contiguous()
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


@dataclass
class BackboneBundle:
    """One loaded backbone: encoders, codec, denoiser, inpainter, schedule.

    ``feature_encoder`` is the pluggable feature-similarity slot used by the
    evaluation metrics (a second self-supervised-style image encoder).
    ``joint_encoder`` maps images and prompts into one space (embed_image /
    embed_text) for the image-text alignment metric.
    """

    name: str
    patch_encoder: object
    text_encoder: object
    codec: object
    denoiser: torch.nn.Module
    inpainter: object
    schedule: DiffusionSchedule
    feature_encoder: object = None
    joint_encoder: object = None

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        for part in (self.patch_encoder, self.text_encoder, self.codec, self.inpainter):
            h.update(getattr(part, "content_hash", lambda: repr(part))().encode())
        h.update(module_content_hash(self.denoiser).encode())
        return h.hexdigest()


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_asset_manifest(path: Path) -> dict:
    """Read a model-asset manifest and verify every listed file hash.

    Format: {"backbone": name, "assets": {key: {"path": ..., "sha256": ...}}}.
    The toy backbone needs no assets, so an empty asset table is valid.
    """
    path = Path(path)
    with open(path) as f:
        manifest = json.load(f)
    root = path.parent
    problems = []
    for key, entry in manifest.get("assets", {}).items():
        asset_path = root / entry["path"]
        if not asset_path.exists():
            problems.append(f"{key}: missing file {entry['path']}")
            continue
        actual = file_sha256(asset_path)
        if actual != entry["sha256"]:
            problems.append(f"{key}: hash mismatch ({actual[:12]} != {entry['sha256'][:12]})")
    if problems:
        raise CompatibilityError("asset manifest verification failed: " + "; ".join(problems))
    return manifest
