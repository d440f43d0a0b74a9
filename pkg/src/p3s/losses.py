"""Training objective: denoising MSE plus attention-map consistency.

The consistency term compares cross-attention maps of the trainable copy
and the frozen original at configured layers (default: last layer only;
every layer as the ablation), each normalized by the average total mass of
the two maps so the scale of the map resolution drops out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DimensionError


@dataclass
class AttentionMapPair:
    """Copy/original cross-attention maps from the same denoising step."""

    copy_maps: list
    original_maps: list
    layer_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.copy_maps) != len(self.original_maps):
            raise DimensionError(
                f"{len(self.copy_maps)} copy maps vs {len(self.original_maps)} original maps")
        for i, (mc, mo) in enumerate(zip(self.copy_maps, self.original_maps)):
            if mc.shape != mo.shape:
                raise DimensionError(f"map pair {i}: {tuple(mc.shape)} vs {tuple(mo.shape)}")
        if not self.layer_ids:
            self.layer_ids = list(range(len(self.copy_maps)))


@dataclass
class LossReport:
    l_ldm: float
    l_ac: float
    total: float
    gamma: float

    def to_json(self) -> dict:
        return {"l_ldm": self.l_ldm, "l_ac": self.l_ac, "total": self.total, "gamma": self.gamma}


def attention_consistency_loss(pair: AttentionMapPair) -> torch.Tensor:
    """Mean over layers of MSE(copy, original) / avg-total-mass.

    avg is (sum(copy) + sum(original)) / 2; an all-zero pair contributes 0
    instead of dividing by zero (only reachable on synthetic inputs).
    """
    if not pair.copy_maps:
        return torch.tensor(0.0, dtype=torch.float64)
    per_layer = []
    for mc, mo in zip(pair.copy_maps, pair.original_maps):
        mc = torch.as_tensor(mc, dtype=torch.float64)
        mo = torch.as_tensor(mo, dtype=torch.float64)
        avg = (mc.sum() + mo.sum()) / 2.0
        if float(avg.detach()) == 0.0:
            per_layer.append(mc.new_zeros(()))
            continue
        per_layer.append(((mc - mo) ** 2).mean() / avg)
    return torch.stack(per_layer).mean()


def denoising_loss(noise_pred: torch.Tensor, noise_true: torch.Tensor) -> torch.Tensor:
    """Elementwise mean squared error between predicted and true noise."""
    if noise_pred.shape != noise_true.shape:
        raise DimensionError(
            f"noise shapes differ: {tuple(noise_pred.shape)} vs {tuple(noise_true.shape)}")
    return ((noise_pred - noise_true) ** 2).mean()


def total_loss(l_ldm: float, l_ac: float, gamma: float = 0.1) -> LossReport:
    """Combine the two terms; gamma weighs the consistency part."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if float(l_ldm) < 0 or float(l_ac) < 0:
        raise ValueError("loss components must be nonnegative")
    return LossReport(l_ldm=float(l_ldm), l_ac=float(l_ac),
                      total=float(l_ldm) + gamma * float(l_ac), gamma=gamma)


def select_map_pair(copy_maps: list, original_maps: list, placement: str = "last") -> AttentionMapPair:
    """Pick the layers entering the consistency loss: 'last' or 'all'."""
    if placement == "last":
        return AttentionMapPair(copy_maps=copy_maps[-1:], original_maps=original_maps[-1:],
                                layer_ids=[len(copy_maps) - 1])
    if placement == "all":
        return AttentionMapPair(copy_maps=list(copy_maps), original_maps=list(original_maps))
    raise ValueError(f"unknown consistency placement '{placement}'")
