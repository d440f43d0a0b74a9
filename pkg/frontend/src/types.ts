/**
 * JSON shapes exchanged with the local subject-selection service.
 *
 * These mirror the server's wire format field for field.  The UI never
 * derives mask pixels itself; it only round-trips these payloads and
 * displays the PNG bytes the server returns.
 */

export interface PointXY {
  x: number;
  y: number;
}

/** Annotation schema shared verbatim with the server and CLI. */
export interface AnnotationJson {
  image: string;
  width: number;
  height: number;
  positive: PointXY;
  negative: PointXY | null;
  identifier: string;
}

export interface MaskPreviewGrid {
  grid_size: number;
  /** G×G 0/1 patch lattice; null in single-subject mode. */
  patch_cells: number[][] | null;
  seed_patch: [number, number] | null;
  positive_patch: [number, number];
}

export interface MaskPreviewResponse {
  schema_version: number;
  /** 1-bit mask, base64 PNG. */
  mask_png: string;
  /** Mask composited over the reference image, base64 PNG. */
  overlay_png: string;
  grid: MaskPreviewGrid;
  params: Record<string, unknown>;
  single_subject: boolean;
  warnings: string[];
}

export interface AnnotationStoreResponse {
  schema_version: number;
  id: string;
  annotation: AnnotationJson;
  /** Asset-root-relative path of the stored annotation JSON. */
  stored: string;
}

export type JobKind = 'train' | 'generate' | 'evaluate';
export type JobStatus = 'queued' | 'running' | 'done' | 'failed';

export interface JobArtifact {
  id: string;
  file: string;
  sha256: string;
}

export interface JobJson {
  id: string;
  kind: JobKind;
  status: JobStatus;
  progress: number;
  artifacts: JobArtifact[];
  error: string | null;
  created: number;
}

export interface ErrorEnvelope {
  schema_version: number;
  error: { code: string; message: string };
}
