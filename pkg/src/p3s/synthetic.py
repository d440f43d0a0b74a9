"""Synthetic two-blob scenes.

Deterministic fixtures for the selection pipeline: a flat background with
two color blobs whose rectangles are snapped to patch boundaries, so the
set of patch cells each blob fully covers is known analytically.  Blob A
plays the wanted subject, blob B the distractor to be masked away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masking import PointAnnotation

# distinct joint-histogram signatures under 4 bins per channel
PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.1, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.9),
}
BACKGROUND = (0.55, 0.55, 0.55)


@dataclass
class TwoBlobScene:
    """Image plus ground truth in patch units."""

    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    grid_size: int
    blob_a_cells: set = field(default_factory=set)  # {(row, col), ...} fully covered
    blob_b_cells: set = field(default_factory=set)
    blob_a_color: tuple = PALETTE["red"]
    blob_b_color: tuple = PALETTE["blue"]
    annotation: PointAnnotation | None = None
    noise_amplitude: float = 0.0

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def single_blob_image(self, which: str) -> np.ndarray:
        """Background with only blob A or only blob B drawn (no noise)."""
        h, w = self.image_dims
        img = np.full((h, w, 3), BACKGROUND, dtype=np.float64)
        cells = self.blob_a_cells if which == "a" else self.blob_b_cells
        color = self.blob_a_color if which == "a" else self.blob_b_color
        patch = h // self.grid_size
        for r, c in cells:
            img[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = color
        return img


def _place_rect(rng: np.random.Generator, grid: int, size: tuple[int, int],
                taken: set, min_gap: int) -> tuple[int, int] | None:
    """Top-left patch coords for a size (h, w) rect keeping min_gap patches
    of Chebyshev clearance from every taken cell; None if no slot found."""
    sh, sw = size
    candidates = [(r, c) for r in range(grid - sh + 1) for c in range(grid - sw + 1)]
    rng.shuffle(candidates)
    for r, c in candidates:
        cells = {(rr, cc) for rr in range(r, r + sh) for cc in range(c, c + sw)}
        ok = all(max(abs(a - b), abs(x - y)) > min_gap for a, x in cells for b, y in taken)
        if ok:
            return r, c
    return None


def make_two_blob_scene(
    seed: int = 0,
    image_size: int = 32,
    grid_size: int = 8,
    min_gap_patches: int = 2,
    noise_amplitude: float = 0.02,
    identifier: str = "sks",
) -> TwoBlobScene:
    """Random patch-aligned scene: the subject blob spans 2x2 or 2x3
    patches and the distractor 3-4 per side, colors drawn without
    replacement from the palette, blobs separated by more than
    ``min_gap_patches`` so smoothing and dilation cannot bridge them.  The
    distractor is kept the larger of the two: a thresholded similarity map
    separates a prominent region far more reliably than a sliver, matching
    how a distracting co-subject actually shows up in a reference photo.

    The annotation puts the positive point at blob A's center pixel and the
    negative point at blob B's; noise is small enough to keep every pixel
    inside its color's histogram bin.
    """
    if image_size % grid_size != 0:
        raise ValueError("image_size must be a multiple of grid_size")
    rng = np.random.default_rng(seed)
    patch = image_size // grid_size
    names = list(PALETTE)
    idx = rng.permutation(len(names))
    color_a, color_b = PALETTE[names[idx[0]]], PALETTE[names[idx[1]]]

    for _ in range(64):  # retry geometry until both rects fit
        size_a = (2, int(rng.integers(2, 4)))
        size_b = (int(rng.integers(3, 5)), int(rng.integers(3, 5)))
        pos_a = _place_rect(rng, grid_size, size_a, set(), min_gap_patches)
        if pos_a is None:
            continue
        cells_a = {(r, c) for r in range(pos_a[0], pos_a[0] + size_a[0])
                   for c in range(pos_a[1], pos_a[1] + size_a[1])}
        pos_b = _place_rect(rng, grid_size, size_b, cells_a, min_gap_patches)
        if pos_b is not None:
            break
    else:
        raise RuntimeError("could not place two separated blobs; loosen the geometry")
    cells_b = {(r, c) for r in range(pos_b[0], pos_b[0] + size_b[0])
               for c in range(pos_b[1], pos_b[1] + size_b[1])}

    img = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.float64)
    for cells, color in ((cells_a, color_a), (cells_b, color_b)):
        for r, c in cells:
            img[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = color
    if noise_amplitude > 0:
        img += rng.uniform(-noise_amplitude, noise_amplitude, img.shape)
        img = np.clip(img, 0.0, 1.0)

    def center_pixel(cells):
        rows = sorted({r for r, _ in cells})
        cols = sorted({c for _, c in cells})
        r, c = rows[len(rows) // 2], cols[len(cols) // 2]
        return c * patch + patch // 2, r * patch + patch // 2  # (x, y)

    annotation = PointAnnotation(
        image_ref=f"two_blob_seed{seed}.png",
        positive=center_pixel(cells_a),
        negative=center_pixel(cells_b),
        image_dims=(image_size, image_size),
        identifier=identifier,
    )
    return TwoBlobScene(
        image=img, grid_size=grid_size,
        blob_a_cells=cells_a, blob_b_cells=cells_b,
        blob_a_color=color_a, blob_b_color=color_b,
        annotation=annotation, noise_amplitude=noise_amplitude,
    )
