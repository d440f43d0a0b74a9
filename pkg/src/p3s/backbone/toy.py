"""Deterministic toy backbone: every component runs on CPU with no weights.

The patch encoder embeds per-patch color histograms through a fixed
orthonormal projection, which keeps cosine similarities between patches
analytically predictable.  The latent codec is a lossless space-to-depth
rearrangement.  The inpainter fills masked pixels with the mean color of the
unmasked border ring.  The denoiser is a small convolutional network with
two blocks, each carrying residual blocks, one self-attention layer (with a
feature-injection path) and one cross-attention layer that taps its
attention map.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import attention
from ..errors import DimensionError, InputError, ParameterError
from .base import (
    BackboneBundle,
    DenoiserTaps,
    DiffusionSchedule,
    LatentImage,
    PatchEncoding,
    TextEncoding,
    to_float_image,
)


def _stable_token_seed(token: str, salt: int) -> int:
    digest = hashlib.blake2s(f"{salt}:{token}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ToyBackboneConfig:
    grid_size: int = 16
    hist_bins: int = 4
    embed_dim: int = 64
    text_dim: int = 16
    text_max_tokens: int = 77
    latent_scale: int = 2
    channels: int = 16
    blocks: int = 2
    res_blocks: int = 2
    heads: int = 2
    timesteps: int = 600
    trunk_gain: float = 0.05
    prior_gray: float = 0.55
    latent_amplitude: float = 4.0
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0


class ToyPatchEncoder:
    """Per-patch normalized color histograms under a fixed orthonormal map.

    Pixel (y, x) belongs to patch (floor(y*G/H), floor(x*G/W)); each patch's
    joint RGB histogram (bins^3 cells, L1-normalized) is multiplied by an
    orthonormal matrix so cosine similarities are preserved exactly.
    """

    def __init__(self, grid_size: int = 16, bins: int = 4, embed_dim: int | None = None, seed: int = 0):
        if grid_size < 2:
            raise InputError("grid_size must be >= 2")
        self.grid_size = grid_size
        self.bins = bins
        self.hist_dim = bins**3
        self.embed_dim = self.hist_dim if embed_dim is None else embed_dim
        if self.embed_dim > self.hist_dim:
            raise InputError(f"embed_dim {self.embed_dim} exceeds histogram dim {self.hist_dim}")
        self.seed = seed
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.hist_dim, self.hist_dim)))
        self._projection = q[: self.embed_dim]  # orthonormal rows

    def content_hash(self) -> str:
        key = f"toy-patch-encoder:g={self.grid_size}:b={self.bins}:d={self.embed_dim}:s={self.seed}"
        return hashlib.sha256(key.encode()).hexdigest()

    def _pixel_bin_index(self, image: np.ndarray) -> np.ndarray:
        quant = np.minimum((image * self.bins).astype(np.int64), self.bins - 1)
        return (quant[..., 0] * self.bins + quant[..., 1]) * self.bins + quant[..., 2]

    def encode(self, image: np.ndarray) -> PatchEncoding:
        image = to_float_image(image)
        h, w, _ = image.shape
        g = self.grid_size
        if h < g or w < g:
            raise DimensionError(f"image {h}x{w} smaller than the {g}x{g} patch grid")
        rows = (np.arange(h) * g) // h
        cols = (np.arange(w) * g) // w
        patch_id = rows[:, None] * g + cols[None, :]
        bin_id = self._pixel_bin_index(image)
        flat = patch_id.ravel() * self.hist_dim + bin_id.ravel()
        counts = np.bincount(flat, minlength=g * g * self.hist_dim).reshape(g * g, self.hist_dim)
        hists = counts / counts.sum(axis=1, keepdims=True)
        grid = (hists @ self._projection.T).reshape(g, g, self.embed_dim)
        global_hist = np.bincount(bin_id.ravel(), minlength=self.hist_dim).astype(np.float64)
        global_hist /= global_hist.sum()
        return PatchEncoding(grid=grid, global_token=self._projection @ global_hist, source_dims=(h, w))

    def global_feature(self, image: np.ndarray) -> np.ndarray:
        """Whole-image embedding, used as the toy feature-similarity vector."""
        return self.encode(image).global_token


class ToyTextEncoder:
    """Whitespace tokenizer with deterministic per-token hash embeddings."""

    def __init__(self, dim: int = 16, max_tokens: int = 77, identifier: str = "sks", seed: int = 0):
        self.dim = dim
        self.max_tokens = max_tokens
        self.identifier = identifier
        self.seed = seed

    def content_hash(self) -> str:
        key = f"toy-text-encoder:d={self.dim}:m={self.max_tokens}:s={self.seed}"
        return hashlib.sha256(key.encode()).hexdigest()

    def _token_embedding(self, token: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_token_seed(token, self.seed))
        return rng.standard_normal(self.dim) / math.sqrt(self.dim)

    def encode(self, prompt: str) -> TextEncoding:
        words = prompt.split()
        if not words:
            # Unconditional prompt: a single fixed null token.
            tokens = self._token_embedding("<uncond>")[None, :]
            return TextEncoding(tokens=tokens, prompt_text=prompt, identifier_span=None)
        truncated = len(words) > self.max_tokens
        if truncated:
            warnings.warn(f"prompt truncated to {self.max_tokens} tokens", stacklevel=2)
            words = words[: self.max_tokens]
        tokens = np.stack([self._token_embedding(w) for w in words])
        span = None
        if self.identifier in words:
            idx = words.index(self.identifier)
            span = (idx, idx + 1)
        return TextEncoding(tokens=tokens, prompt_text=prompt, identifier_span=span, truncated=truncated)


class ToyLatentCodec:
    """Lossless space-to-depth codec: (H, W, 3) <-> (3*s*s, H/s, W/s).

    Latents are amplified so their scale resembles the unit-variance
    latents diffusion models are trained on; the inverse restores pixels
    exactly.
    """

    def __init__(self, scale: int = 2, amplitude: float = 2.0):
        if scale < 1:
            raise InputError("codec scale must be >= 1")
        if amplitude <= 0:
            raise InputError("codec amplitude must be > 0")
        self.scale = scale
        self.amplitude = float(amplitude)
        self.channels = 3 * scale * scale

    def content_hash(self) -> str:
        return hashlib.sha256(f"toy-codec:s={self.scale}:a={self.amplitude}".encode()).hexdigest()

    def encode(self, image: np.ndarray) -> LatentImage:
        image = to_float_image(image)
        h, w, c = image.shape
        s = self.scale
        if h % s or w % s:
            raise DimensionError(f"image dims {h}x{w} not divisible by codec scale {s}")
        blocks = image.reshape(h // s, s, w // s, s, c)
        latent = blocks.transpose(1, 3, 4, 0, 2).reshape(s * s * c, h // s, w // s)
        return LatentImage(data=latent * self.amplitude, scale_info=s)

    def decode(self, latent: LatentImage) -> np.ndarray:
        s = self.scale
        c, lh, lw = latent.data.shape
        if c != self.channels:
            raise DimensionError(f"latent has {c} channels, codec expects {self.channels}")
        pixels = latent.data / self.amplitude
        blocks = pixels.reshape(s, s, 3, lh, lw)
        return blocks.transpose(3, 0, 4, 1, 2).reshape(lh * s, lw * s, 3)


class ToyInpainter:
    """Replaces masked pixels with the mean color of the unmasked border ring."""

    def content_hash(self) -> str:
        return hashlib.sha256(b"toy-inpainter:border-mean").hexdigest()

    def inpaint(self, image: np.ndarray, mask_bits: np.ndarray, prompt: str = "background", seed: int = 0) -> np.ndarray:
        image = to_float_image(image)
        bits = np.asarray(mask_bits, dtype=bool)
        if bits.shape != image.shape[:2]:
            raise DimensionError(f"mask {bits.shape} does not match image {image.shape[:2]}")
        if bits.all():
            raise InputError("refusing an all-true mask: nothing of the reference survives")
        if not bits.any():
            warnings.warn("inpaint called with an empty mask; returning the image unchanged", stacklevel=2)
            return image.copy()
        from scipy.ndimage import binary_dilation

        ring = binary_dilation(bits, structure=np.ones((3, 3), bool)) & ~bits
        source = ring if ring.any() else ~bits
        fill = image[source].mean(axis=0)
        out = image.copy()
        out[bits] = fill
        return out


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.freqs.dtype, device=self.freqs.device)
        angles = t * self.freqs
        emb = torch.cat([torch.sin(angles), torch.cos(angles)])
        if emb.shape[0] < self.dim:  # odd dim
            emb = torch.cat([emb, emb.new_zeros(self.dim - emb.shape[0])])
        return self.mlp(emb)


class ToyResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, channels)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.silu(self.conv1(x) + self.time_proj(temb)[None, :, None, None])
        return x + self.conv2(h)


class ToySelfAttention(nn.Module):
    """Self-attention over flattened spatial tokens with a feature-injection path."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor, injected: torch.Tensor | None = None, lam: float = 0.2):
        z = self.norm(tokens)
        if injected is None:
            attended = attention.self_attention(z, self.q.weight, self.k.weight, self.v.weight, self.heads)
        else:
            attended = attention.injected_self_attention(
                z, injected, lam, self.q.weight, self.k.weight, self.v.weight, self.heads
            )
        # the tap is the pre-norm stream: it keeps per-token amplitude, which
        # the normalized attention operand deliberately discards
        return tokens + self.out(attended), tokens


class ToyCrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, tokens: torch.Tensor, context: torch.Tensor):
        z = self.norm(tokens)
        attended, amap = attention.cross_attention(
            z, context, self.q.weight, self.k.weight, self.v.weight, self.heads
        )
        return tokens + self.out(attended), amap


class ToyDenoiserBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int, context_dim: int, res_blocks: int, heads: int):
        super().__init__()
        self.res_blocks = nn.ModuleList(ToyResBlock(channels, temb_dim) for _ in range(res_blocks))
        self.self_attn = ToySelfAttention(channels, heads)
        self.cross_attn = ToyCrossAttention(channels, context_dim, heads)


class ToyDenoiser(nn.Module):
    """Small conv/attention noise predictor operating on a single (C, h, w) latent.

    The frozen core is an exact noise predictor for a world whose every
    image is the flat neutral latent: eps = (x - sqrt(acp_t) * prior) /
    sqrt(1 - acp_t).  Sampled alone it walks any start back to that flat
    latent, which is the role a pretrained backbone plays at scale.  The
    conv/attention trunk rides on top with a small gain and is the surface
    the injection pathway steers.

    ``forward`` optionally consumes one injected feature tensor per
    self-attention layer (entries may be None to leave a layer untouched)
    and returns the noise prediction together with DenoiserTaps.
    """

    def __init__(self, in_channels: int, channels: int, context_dim: int,
                 alphas_cumprod: np.ndarray, prior_fill: float,
                 blocks: int = 2, res_blocks: int = 2, heads: int = 2,
                 trunk_gain: float = 0.05):
        super().__init__()
        self.in_channels = in_channels
        self.channels = channels
        self.context_dim = context_dim
        self.time_embed = SinusoidalTimeEmbedding(channels)
        self.conv_in = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.blocks = nn.ModuleList(
            ToyDenoiserBlock(channels, channels, context_dim, res_blocks, heads) for _ in range(blocks)
        )
        self.conv_out = nn.Conv2d(channels, in_channels, 3, padding=1)
        self.register_buffer("acp", torch.as_tensor(alphas_cumprod, dtype=torch.float64))
        self.register_buffer("prior_fill", torch.tensor(float(prior_fill), dtype=torch.float64))
        self.register_buffer("trunk_gain", torch.tensor(float(trunk_gain), dtype=torch.float64))

    @property
    def num_self_attention_layers(self) -> int:
        return len(self.blocks)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        context: torch.Tensor,
        injected_features: list | None = None,
        lam: float = 0.2,
    ) -> tuple[torch.Tensor, DenoiserTaps]:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise DimensionError(f"latent must be ({self.in_channels}, h, w), got {tuple(x.shape)}")
        if injected_features is not None and len(injected_features) != len(self.blocks):
            raise DimensionError(
                f"expected {len(self.blocks)} injected features, got {len(injected_features)}"
            )
        ti = int(t)
        if not (1 <= ti < self.acp.shape[0]):
            raise ParameterError(f"timestep {ti} outside [1, {self.acp.shape[0] - 1}]")
        temb = self.time_embed(t)
        h = self.conv_in(x[None])[0]
        _, hh, ww = h.shape
        taps = DenoiserTaps()
        for i, block in enumerate(self.blocks):
            for rb in block.res_blocks:
                h = rb(h[None], temb)[0]
            tokens = h.reshape(self.channels, hh * ww).T
            injected = injected_features[i] if injected_features is not None else None
            tokens, z = block.self_attn(tokens, injected, lam)
            taps.self_attention_hiddens.append(z)
            tokens, amap = block.cross_attn(tokens, context)
            taps.cross_attention_maps.append(amap)
            h = tokens.T.reshape(self.channels, hh, ww)
        a = self.acp[ti]
        prior_eps = (x - a.sqrt() * self.prior_fill) / (1.0 - a).sqrt()
        eps = prior_eps + self.trunk_gain * self.conv_out(h[None])[0]
        return eps, taps


class ToyJointEncoder:
    """Maps images and prompts into one space for the text-alignment metric.

    Image side: the patch encoder's global feature.  Text side: the mean
    token embedding pushed through a fixed seeded projection to the image
    feature dim.  Purely structural; useful for protocol plumbing and tests.
    """

    def __init__(self, patch_encoder: ToyPatchEncoder, text_encoder: ToyTextEncoder, seed: int = 0):
        self.patch_encoder = patch_encoder
        self.text_encoder = text_encoder
        rng = np.random.default_rng(seed + 7)
        self._proj = rng.standard_normal((patch_encoder.embed_dim, text_encoder.dim))
        self._proj /= math.sqrt(text_encoder.dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.patch_encoder.global_feature(image)

    def embed_text(self, prompt: str) -> np.ndarray:
        tokens = self.text_encoder.encode(prompt).tokens
        return self._proj @ tokens.mean(axis=0)


def build_toy_backbone(config: ToyBackboneConfig | None = None, identifier: str = "sks") -> BackboneBundle:
    """Assemble the full toy bundle; all randomness is seeded from the config."""
    cfg = config or ToyBackboneConfig()
    patch_encoder = ToyPatchEncoder(cfg.grid_size, cfg.hist_bins, cfg.embed_dim, seed=cfg.seed)
    text_encoder = ToyTextEncoder(cfg.text_dim, cfg.text_max_tokens, identifier=identifier, seed=cfg.seed)
    codec = ToyLatentCodec(cfg.latent_scale, amplitude=cfg.latent_amplitude)
    schedule = DiffusionSchedule(cfg.timesteps, beta_start=cfg.beta_start, beta_end=cfg.beta_end)
    torch.manual_seed(cfg.seed)
    denoiser = ToyDenoiser(
        in_channels=codec.channels,
        channels=cfg.channels,
        context_dim=cfg.text_dim,
        alphas_cumprod=schedule.alphas_cumprod,
        prior_fill=cfg.prior_gray * cfg.latent_amplitude,
        blocks=cfg.blocks,
        res_blocks=cfg.res_blocks,
        heads=cfg.heads,
        trunk_gain=cfg.trunk_gain,
    ).to(torch.float64)
    denoiser.requires_grad_(False)
    # Feature-similarity slot: an independent histogram encoder with finer bins.
    feature_encoder = ToyPatchEncoder(cfg.grid_size, bins=5, embed_dim=None, seed=cfg.seed + 1)
    return BackboneBundle(
        name="toy",
        patch_encoder=patch_encoder,
        text_encoder=text_encoder,
        codec=codec,
        denoiser=denoiser,
        inpainter=ToyInpainter(),
        schedule=schedule,
        feature_encoder=feature_encoder,
        joint_encoder=ToyJointEncoder(patch_encoder, text_encoder, seed=cfg.seed),
    )
