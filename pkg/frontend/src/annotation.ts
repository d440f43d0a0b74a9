/**
 * Canvas-side annotation state: one positive point and at most one negative
 * point on a loaded reference image, plus display flags for the overlay and
 * the patch lattice.
 *
 * Deliberately free of mask math — the authoritative mask is whatever the
 * server returns for the exported annotation, so the overlay shown here and
 * the mask produced later from the export are the same bytes.
 */

import type { AnnotationJson, MaskPreviewResponse, PointXY } from './types.js';

export type Polarity = 'positive' | 'negative';

export interface CanvasState {
  /** Filename recorded in the exported annotation. */
  imageName: string;
  /** Base64 PNG of the loaded image, sent inline with preview requests. */
  imageData: string | null;
  width: number;
  height: number;
  positive: PointXY | null;
  negative: PointXY | null;
  identifier: string;
  /** Base64 PNG of the last overlay the server returned. */
  overlayPng: string | null;
  /** True when the points changed after overlayPng was produced. */
  overlayStale: boolean;
  overlayOpacity: number;
  gridVisible: boolean;
  /** Patch lattice size reported by the last preview response. */
  gridSize: number | null;
}

export function createState(
  imageName: string,
  width: number,
  height: number,
  imageData: string | null = null,
): CanvasState {
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
    throw new Error(`image dimensions must be positive integers, got ${width}x${height}`);
  }
  return {
    imageName,
    imageData,
    width,
    height,
    positive: null,
    negative: null,
    identifier: 'sks',
    overlayPng: null,
    overlayStale: false,
    overlayOpacity: 0.6,
    gridVisible: false,
    gridSize: null,
  };
}

/**
 * Map a click in displayed-element coordinates to an integer image pixel.
 * Returns null when the click falls outside the displayed image, in which
 * case the caller must ignore it entirely (no state change, no request).
 */
export function clickToPixel(
  offsetX: number,
  offsetY: number,
  displayWidth: number,
  displayHeight: number,
  imageWidth: number,
  imageHeight: number,
): PointXY | null {
  if (displayWidth <= 0 || displayHeight <= 0) {
    return null;
  }
  if (offsetX < 0 || offsetY < 0 || offsetX >= displayWidth || offsetY >= displayHeight) {
    return null;
  }
  // floor + clamp snaps the edge of the last displayed pixel row/column
  // inside the image bounds
  const x = Math.min(imageWidth - 1, Math.floor((offsetX / displayWidth) * imageWidth));
  const y = Math.min(imageHeight - 1, Math.floor((offsetY / displayHeight) * imageHeight));
  return { x, y };
}

/**
 * Place (or move) the point of one polarity.  Placing a point of a polarity
 * that already has one replaces it, so there is never more than one point
 * per polarity.  Returns null for an out-of-bounds or non-integer pixel —
 * the click is ignored.  Any accepted change marks the overlay stale until
 * the next preview lands.
 */
export function placePoint(state: CanvasState, polarity: Polarity, pixel: PointXY): CanvasState | null {
  const { x, y } = pixel;
  if (!Number.isInteger(x) || !Number.isInteger(y)) {
    return null;
  }
  if (x < 0 || y < 0 || x >= state.width || y >= state.height) {
    return null;
  }
  return { ...state, [polarity]: { x, y }, overlayStale: true };
}

/** Fold a preview response into the state: fresh overlay, lattice size. */
export function applyPreview(state: CanvasState, res: MaskPreviewResponse): CanvasState {
  return {
    ...state,
    overlayPng: res.overlay_png,
    overlayStale: false,
    gridSize: res.grid.grid_size,
  };
}

export type ExportResult =
  | { ok: true; annotation: AnnotationJson }
  | { ok: false; reason: 'missing_positive' | 'confirm_single_subject'; hint: string };

/**
 * Build the export payload in the exact schema the server parses.  A missing
 * positive point blocks the export; a missing negative point needs explicit
 * single-subject confirmation so a half-finished annotation is not exported
 * by accident.
 */
export function exportAnnotation(
  state: CanvasState,
  opts: { confirmSingleSubject?: boolean } = {},
): ExportResult {
  if (state.positive === null) {
    return {
      ok: false,
      reason: 'missing_positive',
      hint: 'Place a positive point on the subject before exporting.',
    };
  }
  if (state.negative === null && !opts.confirmSingleSubject) {
    return {
      ok: false,
      reason: 'confirm_single_subject',
      hint: 'No negative point is set. Confirm single-subject mode to export with negative = null.',
    };
  }
  return {
    ok: true,
    annotation: {
      image: state.imageName,
      width: state.width,
      height: state.height,
      positive: { x: state.positive.x, y: state.positive.y },
      negative: state.negative === null ? null : { x: state.negative.x, y: state.negative.y },
      identifier: state.identifier,
    },
  };
}

/** Offsets (pixels) of the inner lattice lines for a G-cell axis of the given extent. */
export function gridLinePositions(extent: number, gridSize: number): number[] {
  const lines: number[] = [];
  for (let i = 1; i < gridSize; i++) {
    lines.push((i * extent) / gridSize);
  }
  return lines;
}
