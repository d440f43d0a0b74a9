"""Trainable-copy condition injection.

A slimmed trainable copy of the frozen denoiser (one residual block per
block, attention cloned) runs on the subject-conditioned latent and emits
one zero-projected hidden feature per self-attention layer.  Those features
are concatenated into the frozen network's self-attention key/value token
sets, scaled by a timestep-dependent control weight.  All zero projections
start exactly at zero, so a fresh copy changes nothing but the softmax
denominator; a zero control weight bypasses the concatenation entirely and
reproduces the frozen network bit for bit.
"""

from __future__ import annotations

import copy as copy_mod
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .backbone.base import DenoiserTaps, TextEncoding
from .errors import CompatibilityError, DimensionError, ParameterError, StateError

SCHEDULE_VARIANTS = ("fixed", "poly", "increasing", "decreasing", "learned")


class LearnedWeightNet(nn.Module):
    """Tiny scalar net on normalized timestep, output bounded to [0, 1 + beta]."""

    def __init__(self, beta: float = 0.2, hidden: int = 16, seed: int = 0):
        super().__init__()
        self.beta = beta
        torch.manual_seed(seed)
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.SiLU(), nn.Linear(hidden, 1))
        self.to(torch.float64)

    def forward(self, t_frac: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(t_frac)) * (1.0 + self.beta)


@dataclass
class WeightSchedule:
    """Control-weight curve over denoising timesteps.

    ``poly`` is 1 - alpha*(t/T)^k + beta: strong control late in
    denoising (small t), weak early (large t).  ``decreasing`` names the
    same decreasing-in-t curve; ``increasing`` mirrors it.  ``fixed`` is a
    constant and ``learned`` defers to a small trained net.
    """

    variant: str = "poly"
    alpha: float = 0.5
    beta: float = 0.2
    k: float = 2.0
    fixed_value: float = 1.0
    net: Optional[LearnedWeightNet] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in SCHEDULE_VARIANTS:
            raise ParameterError(f"unknown schedule variant '{self.variant}'")

    def to_json(self) -> dict:
        return {"variant": self.variant, "alpha": self.alpha, "beta": self.beta,
                "k": self.k, "fixed_value": self.fixed_value}

    @classmethod
    def from_json(cls, payload: dict) -> "WeightSchedule":
        known = {f: payload[f] for f in ("variant", "alpha", "beta", "k", "fixed_value")
                 if f in payload}
        unknown = set(payload) - set(known)
        if unknown:
            raise ParameterError(f"unknown schedule fields: {sorted(unknown)}")
        return cls(**known)


def schedule_weight(t: float, total_steps: int, schedule: WeightSchedule) -> float:
    """Evaluate the control weight at timestep ``t`` of ``total_steps``."""
    if total_steps <= 0:
        raise ParameterError("total_steps must be > 0")
    if not (0 <= t <= total_steps):
        raise ParameterError(f"timestep {t} outside [0, {total_steps}]")
    frac = t / total_steps
    if schedule.variant == "fixed":
        return float(schedule.fixed_value)
    if schedule.variant in ("poly", "decreasing"):
        return float(1.0 - schedule.alpha * frac**schedule.k + schedule.beta)
    if schedule.variant == "increasing":
        return float(1.0 - schedule.alpha * (1.0 - frac) ** schedule.k + schedule.beta)
    if schedule.variant == "learned":
        if schedule.net is None:
            raise StateError("learned schedule has no trained weight net loaded")
        with torch.no_grad():
            return float(schedule.net(torch.tensor([[frac]], dtype=torch.float64))[0, 0])
    raise ParameterError(f"unknown schedule variant '{schedule.variant}'")


@dataclass
class InjectionConfig:
    """Injection strength and placement."""

    lam: float = 0.2
    injected_layer_subset: Optional[list[int]] = None  # None = every mapped layer
    enable: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")

    def to_json(self) -> dict:
        return {"lambda": self.lam, "injected_layer_subset": self.injected_layer_subset,
                "enable": self.enable}

    @classmethod
    def from_json(cls, payload: dict) -> "InjectionConfig":
        return cls(lam=payload.get("lambda", 0.2),
                   injected_layer_subset=payload.get("injected_layer_subset"),
                   enable=payload.get("enable", True))


@dataclass
class InjectionFeatures:
    """Per-layer zero-projected hidden features emitted by one copy pass."""

    features: list[torch.Tensor]
    timestep: float
    weight_applied: float = 1.0


class CopyBlock(nn.Module):
    def __init__(self, res_block: nn.Module, self_attn: nn.Module, cross_attn: nn.Module):
        super().__init__()
        self.res_block = res_block
        self.self_attn = self_attn
        self.cross_attn = cross_attn


class SimplifiedCopy(nn.Module):
    """One-residual-block-per-block clone of the denoiser with zero taps.

    The layer map is positional: copy self-attention layer i pairs with
    original self-attention layer i.  Forward returns the zero-projected
    features and the copy's cross-attention maps (consistency-loss side).
    """

    def __init__(self, conv_in: nn.Module, time_embed: nn.Module,
                 blocks: list[CopyBlock], channels: int):
        super().__init__()
        self.conv_in = conv_in
        self.time_embed = time_embed
        self.blocks = nn.ModuleList(blocks)
        self.channels = channels
        self.zero_projs = nn.ModuleList()
        for _ in blocks:
            proj = nn.Linear(channels, channels)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.zero_projs.append(proj)
        self.to(torch.float64)

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor, t, context: torch.Tensor):
        temb = self.time_embed(t)
        h = self.conv_in(x[None])[0]
        _, hh, ww = h.shape
        features, cross_maps = [], []
        for block, proj in zip(self.blocks, self.zero_projs):
            h = block.res_block(h[None], temb)[0]
            tokens = h.reshape(self.channels, hh * ww).T
            tokens, z = block.self_attn(tokens)
            features.append(proj(z))
            tokens, amap = block.cross_attn(tokens, context)
            cross_maps.append(amap)
            h = tokens.T.reshape(self.channels, hh, ww)
        return features, cross_maps


def init_trainable_copy(original: nn.Module) -> SimplifiedCopy:
    """Clone the trainable simplified copy off a frozen denoiser.

    Takes the first residual block of every block plus its attention pair;
    the original is never modified.  Unmappable structure raises with the
    full list of problems.
    """
    problems = []
    for attr in ("conv_in", "time_embed", "blocks", "channels"):
        if not hasattr(original, attr):
            problems.append(f"denoiser lacks '{attr}'")
    if problems:
        raise CompatibilityError("cannot build trainable copy: " + "; ".join(problems))
    blocks = []
    for i, block in enumerate(original.blocks):
        missing = [a for a in ("res_blocks", "self_attn", "cross_attn") if not hasattr(block, a)]
        if missing:
            problems.append(f"block {i} lacks {missing}")
            continue
        if len(block.res_blocks) == 0:
            problems.append(f"block {i} has no residual blocks")
            continue
        blocks.append(CopyBlock(
            res_block=copy_mod.deepcopy(block.res_blocks[0]),
            self_attn=copy_mod.deepcopy(block.self_attn),
            cross_attn=copy_mod.deepcopy(block.cross_attn),
        ))
    if problems:
        raise CompatibilityError("cannot build trainable copy: " + "; ".join(problems))
    copy = SimplifiedCopy(
        conv_in=copy_mod.deepcopy(original.conv_in),
        time_embed=copy_mod.deepcopy(original.time_embed),
        blocks=blocks,
        channels=original.channels,
    )
    copy.requires_grad_(True)
    return copy


def extract_injection_features(
    copy: SimplifiedCopy,
    subject_input: torch.Tensor,
    text: TextEncoding | torch.Tensor,
    t,
) -> InjectionFeatures:
    """Run the copy once on the conditioned latent (noised latent plus fused
    subject latent, pre-summed by the caller) and tap every layer."""
    context = torch.as_tensor(text.tokens if isinstance(text, TextEncoding) else text,
                              dtype=torch.float64)
    features, _ = copy(subject_input, t, context)
    return InjectionFeatures(features=features, timestep=float(t))


@dataclass
class JointDenoiseResult:
    noise_pred: torch.Tensor
    copy_cross_maps: list
    original_cross_maps: list
    weight: float
    injected: bool
    original_taps: DenoiserTaps


def denoise_joint(
    original: nn.Module,
    copy: Optional[SimplifiedCopy],
    x_t: torch.Tensor,
    t,
    text: TextEncoding | torch.Tensor,
    subject_latent: Optional[torch.Tensor],
    config: InjectionConfig,
    schedule: WeightSchedule,
    total_steps: int,
    weight_override=None,
) -> JointDenoiseResult:
    """One denoising evaluation with optional feature injection.

    With injection disabled, a zero control weight, or no copy, the frozen
    network runs untouched on its plain code path so outputs are exactly
    the baseline's.  Otherwise the copy consumes x_t plus the fused subject
    latent and its scaled features join each mapped self-attention layer.
    ``weight_override`` replaces the schedule lookup; a tensor keeps the
    weight differentiable for joint schedule training.
    """
    context = torch.as_tensor(text.tokens if isinstance(text, TextEncoding) else text,
                              dtype=torch.float64)
    if weight_override is None:
        w_t = schedule_weight(t, total_steps, schedule)
    else:
        w_t = weight_override
    bypass = (not config.enable) or copy is None or (
        isinstance(w_t, float) and w_t == 0.0)
    if bypass:
        eps, taps = original(x_t, t, context)
        return JointDenoiseResult(
            noise_pred=eps, copy_cross_maps=[], original_cross_maps=taps.cross_attention_maps,
            weight=float(w_t), injected=False, original_taps=taps)
    if subject_latent is None:
        raise StateError("injection enabled but no subject latent provided")
    if subject_latent.shape != x_t.shape:
        raise DimensionError(
            f"subject latent {tuple(subject_latent.shape)} != noised latent {tuple(x_t.shape)}")
    features, copy_cross_maps = copy(x_t + subject_latent, t, context)
    subset = config.injected_layer_subset
    injected = []
    for i, f in enumerate(features):
        keep = subset is None or i in subset
        injected.append(w_t * f if keep else None)
    eps, taps = original(x_t, t, context, injected_features=injected, lam=config.lam)
    w_report = float(w_t.detach()) if isinstance(w_t, torch.Tensor) else float(w_t)
    return JointDenoiseResult(
        noise_pred=eps, copy_cross_maps=copy_cross_maps,
        original_cross_maps=taps.cross_attention_maps,
        weight=w_report, injected=True, original_taps=taps)
