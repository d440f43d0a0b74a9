"""Point-supervised subject masking.

From one positive and one negative pixel point on a reference image, derive
a rough pixel mask over the distractor subject without any segmentation
model: map each point to its patch cell, build cosine similarity maps
against the patch-encoder grid, fuse them (foreground map scaled against
the complement of the background map, both rescaled from [-1,1] to [0,1]),
smooth with a Gaussian, binarize with Otsu's method, keep only the
component connected to the seed point, and expand to pixel resolution with
a safety dilation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .backbone.base import PatchEncoding
from .errors import (
    AnnotationError,
    DegenerateEncodingError,
    DegenerateMapError,
    DimensionError,
    EmptyMaskError,
    ParameterError,
)

SCHEMA_VERSION = 1


@dataclass
class PointAnnotation:
    """Reference image plus positive/negative pixel points, (x, y) origin top-left."""

    image_ref: str
    positive: tuple[int, int]
    negative: Optional[tuple[int, int]]
    image_dims: tuple[int, int]  # (H, W)
    identifier: str = "sks"

    def __post_init__(self):
        h, w = self.image_dims
        for name, point in (("positive", self.positive), ("negative", self.negative)):
            if point is None:
                continue
            x, y = point
            if not (0 <= x < w and 0 <= y < h):
                raise AnnotationError(f"{name} point ({x}, {y}) outside {w}x{h} image")
        if self.negative is not None and tuple(self.positive) == tuple(self.negative):
            raise AnnotationError("positive and negative points coincide")

    def to_json(self) -> dict:
        h, w = self.image_dims
        return {
            "image": self.image_ref,
            "width": w,
            "height": h,
            "positive": {"x": self.positive[0], "y": self.positive[1]},
            "negative": None if self.negative is None else {"x": self.negative[0], "y": self.negative[1]},
            "identifier": self.identifier,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PointAnnotation":
        for key in ("image", "width", "height", "positive"):
            if key not in payload:
                raise AnnotationError(f"annotation missing field '{key}'")
        pos = payload["positive"]
        neg = payload.get("negative")
        return cls(
            image_ref=payload["image"],
            positive=(int(pos["x"]), int(pos["y"])),
            negative=None if neg is None else (int(neg["x"]), int(neg["y"])),
            image_dims=(int(payload["height"]), int(payload["width"])),
            identifier=payload.get("identifier", "sks"),
        )


def load_annotation(path: Path) -> PointAnnotation:
    with open(path) as f:
        return PointAnnotation.from_json(json.load(f))


@dataclass
class SimilarityMap:
    values: np.ndarray
    seed_patch: tuple[int, int]
    polarity: str  # "positive" | "negative"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.polarity not in ("positive", "negative"):
            raise ParameterError(f"unknown polarity '{self.polarity}'")
        if self.values.min() < -1.0 - 1e-9 or self.values.max() > 1.0 + 1e-9:
            raise DimensionError("similarity values outside [-1, 1]")
        self.values = np.clip(self.values, -1.0, 1.0)
        if abs(self.values[self.seed_patch] - 1.0) > 1e-6:
            raise DegenerateEncodingError(f"seed cell similarity {self.values[self.seed_patch]} != 1")


@dataclass
class PatchMask:
    cells: np.ndarray
    seed_patch: tuple[int, int]

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)


@dataclass
class PixelMask:
    bits: np.ndarray
    dilation_radius_patches: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.dilation_radius_patches < 0:
            raise ParameterError("dilation must be >= 0")

    @property
    def empty(self) -> bool:
        return not self.bits.any()


@dataclass
class MaskConfig:
    """Knobs of the point-to-mask pipeline."""

    sigma: float = 1.0
    truncate: float = 2.0
    otsu_bins: int = 256
    dilation_patches: int = 1
    # "negative_foreground" masks the distractor for inpainting; the
    # "positive_foreground" variant thresholds the positive map against the
    # negative complement instead and seeds at the positive point.
    polarity: str = "negative_foreground"
    inpaint_prompt: str = "background"

    def to_json(self) -> dict:
        return {
            "sigma": self.sigma,
            "truncate": self.truncate,
            "otsu_bins": self.otsu_bins,
            "dilation_patches": self.dilation_patches,
            "polarity": self.polarity,
            "inpaint_prompt": self.inpaint_prompt,
        }


def point_to_patch(point: tuple[int, int], image_dims: tuple[int, int], grid: int) -> tuple[int, int]:
    """Map an (x, y) pixel point to its (row, col) patch cell."""
    x, y = point
    h, w = image_dims
    if not (0 <= x < w and 0 <= y < h):
        raise AnnotationError(f"point ({x}, {y}) outside {w}x{h} image")
    return (y * grid) // h, (x * grid) // w


def patch_similarity(enc: PatchEncoding, seed: tuple[int, int]) -> SimilarityMap:
    """Cosine similarity between the seed patch embedding and every cell."""
    g = enc.grid_size
    r, c = seed
    if not (0 <= r < g and 0 <= c < g):
        raise AnnotationError(f"seed patch {seed} outside {g}x{g} grid")
    seed_vec = enc.grid[r, c]
    seed_norm = np.linalg.norm(seed_vec)
    if seed_norm < 1e-12:
        raise DegenerateEncodingError(f"zero-norm embedding at seed patch {seed}")
    norms = np.linalg.norm(enc.grid, axis=2)
    zero_cells = norms < 1e-12
    if zero_cells.any():
        warnings.warn(f"{int(zero_cells.sum())} zero-norm patch embeddings set to similarity 0", stacklevel=2)
    safe = np.where(zero_cells, 1.0, norms)
    values = enc.grid @ seed_vec / (safe * seed_norm)
    values[zero_cells] = 0.0
    return SimilarityMap(values=np.clip(values, -1.0, 1.0), seed_patch=(r, c), polarity="positive")


def combine_similarity(foreground: SimilarityMap, background: SimilarityMap) -> np.ndarray:
    """Fuse two opposite-polarity maps into a [0, 1] foreground score.

    Both cosines are rescaled to [0, 1] via (s + 1) / 2 first; the result is
    rescaled(foreground) * (1 - rescaled(background)).
    """
    if foreground.values.shape != background.values.shape:
        raise DimensionError("similarity maps have different grids")
    if foreground.polarity == background.polarity:
        raise ParameterError("combine_similarity needs maps of opposite polarity")
    r_fg = (foreground.values + 1.0) / 2.0
    r_bg = (background.values + 1.0) / 2.0
    return r_fg * (1.0 - r_bg)


def gaussian_smooth(values: np.ndarray, sigma: float, truncate: float = 2.0) -> np.ndarray:
    """Separable Gaussian smoothing, kernel truncated at ``truncate`` sigmas,
    reflect padding.  Matches scipy's gaussian_filter conventions."""
    if sigma <= 0:
        raise ParameterError("sigma must be > 0")
    values = np.asarray(values, dtype=np.float64)
    radius = int(truncate * sigma + 0.5)
    if radius == 0:
        return values.copy()
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    out = values
    for axis in range(2):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in range(2)], mode="symmetric")
        acc = np.zeros_like(out)
        for i, w in enumerate(kernel):
            sl = [slice(None)] * 2
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def otsu_binarize(values: np.ndarray, bins: int = 256, seed_patch: tuple[int, int] = (0, 0)) -> PatchMask:
    """Binarize by the histogram threshold maximizing between-class variance.

    Histogram spans [min, max] with ``bins`` bins; the threshold is the bin
    boundary of the best split and cells strictly above it become true.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        raise DegenerateMapError("constant map: no foreground/background separation exists")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    w1 = total - w0
    mass = np.cumsum(hist * centers)[:-1]
    total_mass = float((hist * centers).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = mass / w0
        mu1 = (total_mass - mass) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -np.inf
    split = int(np.argmax(between))
    threshold = edges[split + 1]
    return PatchMask(cells=values > threshold, seed_patch=seed_patch)


def prune_components(mask: PatchMask, seed: tuple[int, int]) -> PatchMask:
    """Keep exactly the 8-connected component containing the seed cell.

    A false seed cell falls back to the nearest true cell (Chebyshev
    distance, ties broken row-major) with a warning.
    """
    cells = mask.cells
    if not cells.any():
        raise EmptyMaskError("cannot prune an empty mask")
    r, c = seed
    if not cells[r, c]:
        rows, cols = np.nonzero(cells)
        dist = np.maximum(np.abs(rows - r), np.abs(cols - c))
        order = np.lexsort((cols, rows, dist))
        r, c = int(rows[order[0]]), int(cols[order[0]])
        warnings.warn(f"seed cell {seed} not in mask; keeping component of nearest cell ({r}, {c})", stacklevel=2)
    labels, _ = ndimage.label(cells, structure=np.ones((3, 3), dtype=int))
    return PatchMask(cells=labels == labels[r, c], seed_patch=(r, c))


def expand_to_pixel_mask(mask: PatchMask, image_dims: tuple[int, int], dilation_patches: int = 0) -> PixelMask:
    """Nearest-neighbor upsample of patch cells to pixels, then square dilation
    by ``dilation_patches`` patch-widths."""
    if dilation_patches < 0:
        raise ParameterError("dilation_patches must be >= 0")
    h, w = image_dims
    g = mask.cells.shape[0]
    rows = (np.arange(h) * g) // h
    cols = (np.arange(w) * g) // w
    bits = mask.cells[np.ix_(rows, cols)]
    if dilation_patches > 0 and bits.any():
        ry = dilation_patches * -(-h // g)  # ceil patch height in pixels
        rx = dilation_patches * -(-w // g)
        structure = np.ones((2 * ry + 1, 2 * rx + 1), dtype=bool)
        bits = ndimage.binary_dilation(bits, structure=structure)
    return PixelMask(bits=bits, dilation_radius_patches=dilation_patches)


@dataclass
class MaskExtraction:
    """Everything the negative-mask pipeline produced, for artifacts and audit."""

    pixel_mask: PixelMask
    patch_mask: Optional[PatchMask]
    combined_map: Optional[np.ndarray]
    seed_patch: Optional[tuple[int, int]]
    positive_patch: tuple[int, int]
    grid_size: int
    warnings: list = field(default_factory=list)
    single_subject: bool = False


def extract_negative_mask(
    annotation: PointAnnotation,
    enc: PatchEncoding,
    config: MaskConfig | None = None,
) -> MaskExtraction:
    """Full pipeline from two points to the distractor pixel mask.

    Without a negative point the annotation is single-subject and the mask
    is empty (nothing to inpaint).  The positive point's patch cell is
    guaranteed absent from the result; a violation is repaired and logged.
    """
    cfg = config or MaskConfig()
    g = enc.grid_size
    notes: list[str] = []
    pos_patch = point_to_patch(annotation.positive, annotation.image_dims, g)
    if annotation.negative is None:
        empty = PixelMask(bits=np.zeros(annotation.image_dims, dtype=bool),
                          dilation_radius_patches=cfg.dilation_patches)
        return MaskExtraction(
            pixel_mask=empty, patch_mask=None, combined_map=None, seed_patch=None,
            positive_patch=pos_patch, grid_size=g,
            warnings=["single-subject annotation: empty mask, no inpainting needed"],
            single_subject=True,
        )
    neg_patch = point_to_patch(annotation.negative, annotation.image_dims, g)
    m_pos = patch_similarity(enc, pos_patch)
    m_neg = patch_similarity(enc, neg_patch)
    m_neg.polarity = "negative"
    if cfg.polarity == "negative_foreground":
        combined = combine_similarity(m_neg, m_pos)
        seed = neg_patch
    elif cfg.polarity == "positive_foreground":
        combined = combine_similarity(m_pos, m_neg)
        seed = pos_patch
    else:
        raise ParameterError(f"unknown mask polarity '{cfg.polarity}'")
    smoothed = gaussian_smooth(combined, cfg.sigma, cfg.truncate)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        patch_mask = otsu_binarize(smoothed, bins=cfg.otsu_bins, seed_patch=seed)
        patch_mask = prune_components(patch_mask, seed)
    notes.extend(str(w.message) for w in caught)
    if cfg.polarity == "negative_foreground" and patch_mask.cells[pos_patch]:
        patch_mask.cells[pos_patch] = False
        notes.append(f"positive patch {pos_patch} intersected the mask and was removed")
    pixel_mask = expand_to_pixel_mask(patch_mask, annotation.image_dims, cfg.dilation_patches)
    return MaskExtraction(
        pixel_mask=pixel_mask, patch_mask=patch_mask, combined_map=combined,
        seed_patch=seed, positive_patch=pos_patch, grid_size=g, warnings=notes,
    )


def save_mask_artifacts(
    extraction: MaskExtraction,
    annotation: PointAnnotation,
    config: MaskConfig,
    out_dir: Path,
    stem: str = "mask",
    image: np.ndarray | None = None,
) -> dict:
    """Write the 1-bit mask PNG, an optional overlay PNG and the sidecar JSON.

    Returns the sidecar payload (paths are relative to ``out_dir``).
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / f"{stem}.png"
    Image.fromarray(extraction.pixel_mask.bits).convert("1").save(mask_path, bits=1)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "annotation": annotation.to_json(),
        "params": config.to_json(),
        "grid_size": extraction.grid_size,
        "seed_patch": list(extraction.seed_patch) if extraction.seed_patch else None,
        "positive_patch": list(extraction.positive_patch),
        "single_subject": extraction.single_subject,
        "warnings": extraction.warnings,
        "mask_file": mask_path.name,
        "patch_cells": None if extraction.patch_mask is None else extraction.patch_mask.cells.astype(int).tolist(),
    }
    if image is not None:
        overlay = render_mask_overlay(image, extraction.pixel_mask)
        overlay_path = out_dir / f"{stem}_overlay.png"
        Image.fromarray((overlay * 255).astype(np.uint8)).save(overlay_path)
        sidecar["overlay_file"] = overlay_path.name
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar


def render_mask_overlay(image: np.ndarray, mask: PixelMask, alpha: float = 0.5) -> np.ndarray:
    """Blend a red tint over the masked pixels; returns float [0,1] image."""
    from .backbone.base import to_float_image

    img = to_float_image(image).copy()
    tint = np.array([1.0, 0.1, 0.1])
    img[mask.bits] = (1 - alpha) * img[mask.bits] + alpha * tint
    return img
