/**
 * Thin typed client for the service HTTP API.
 *
 * Every state-changing call is a POST; everything else is a GET.  Failures
 * arrive as {error: {code, message}} envelopes and are rethrown as ApiError
 * so callers can branch on the machine-readable code (e.g. trainer_busy).
 */

import type {
  AnnotationJson,
  AnnotationStoreResponse,
  JobJson,
  JobKind,
  MaskPreviewResponse,
} from './types.js';

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

let baseUrl = '';

export function setBaseUrl(url: string): void {
  baseUrl = url.replace(/\/+$/, '');
}

export function getBaseUrl(): string {
  return baseUrl;
}

async function request<T>(path: string, init: RequestInit = {}): Promise<T> {
  const res = await fetch(baseUrl + path, init);
  let body: any = null;
  try {
    body = await res.json();
  } catch {
    // non-JSON body; the status check below decides what to do
  }
  if (!res.ok) {
    const code = body?.error?.code ?? 'http_error';
    const message = body?.error?.message ?? `HTTP ${res.status}`;
    throw new ApiError(res.status, code, message);
  }
  return body as T;
}

function postJson<T>(path: string, payload: unknown, signal?: AbortSignal): Promise<T> {
  return request<T>(path, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: JSON.stringify(payload),
    signal,
  });
}

/** Request a mask preview; imageData carries the reference image inline as base64 PNG. */
export function postMaskPreview(
  annotation: AnnotationJson,
  imageData: string | null,
  params: Record<string, unknown> = {},
  signal?: AbortSignal,
): Promise<MaskPreviewResponse> {
  const body: Record<string, unknown> = { annotation, params };
  if (imageData !== null) {
    body.image_data = imageData;
  }
  return postJson('/mask-preview', body, signal);
}

/** Persist the annotation (and, when given, its image bytes) server-side. */
export function postAnnotation(
  annotation: AnnotationJson,
  imageData: string | null,
): Promise<AnnotationStoreResponse> {
  const body: Record<string, unknown> = { annotation };
  if (imageData !== null) {
    body.image_data = imageData;
  }
  return postJson('/annotations', body);
}

export async function submitJob(kind: JobKind, config: Record<string, unknown>): Promise<JobJson> {
  const res = await postJson<{ job: JobJson }>('/jobs', { kind, config });
  return res.job;
}

export async function getJob(id: string): Promise<JobJson> {
  const res = await request<{ job: JobJson }>(`/jobs/${encodeURIComponent(id)}`);
  return res.job;
}

export function artifactUrl(id: string): string {
  return `${baseUrl}/artifacts/${encodeURIComponent(id)}`;
}
