/**
 * Serializes mask-preview requests: the latest click wins, anything older is
 * aborted, and at most one request is in flight at any moment.  Responses
 * that lost the race are dropped even if their request somehow completed, so
 * exactly one preview is delivered per final point state.
 */

import { postMaskPreview } from './api.js';
import type { AnnotationJson, MaskPreviewResponse } from './types.js';

export type PreviewSender = (
  annotation: AnnotationJson,
  imageData: string | null,
  params: Record<string, unknown>,
  signal: AbortSignal,
) => Promise<MaskPreviewResponse>;

export interface PreviewHandlers {
  onResult: (res: MaskPreviewResponse) => void;
  onError: (err: Error) => void;
}

export class PreviewController {
  private inflight: AbortController | null = null;
  private revision = 0;

  constructor(
    private readonly handlers: PreviewHandlers,
    private readonly send: PreviewSender = (annotation, imageData, params, signal) =>
      postMaskPreview(annotation, imageData, params, signal),
  ) {}

  /** Issue one request for the current point state, cancelling any older one. */
  request(
    annotation: AnnotationJson,
    imageData: string | null,
    params: Record<string, unknown> = {},
  ): void {
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    const revision = ++this.revision;
    this.send(annotation, imageData, params, controller.signal).then(
      (res) => {
        if (revision !== this.revision) {
          return; // a newer click superseded this request
        }
        this.inflight = null;
        this.handlers.onResult(res);
      },
      (err: unknown) => {
        if (revision !== this.revision || (err as Error)?.name === 'AbortError') {
          return; // cancellation is not an error the user needs to see
        }
        this.inflight = null;
        this.handlers.onError(err instanceof Error ? err : new Error(String(err)));
      },
    );
  }

  hasInflight(): boolean {
    return this.inflight !== null;
  }

  /** Abort any in-flight request and drop its eventual result. */
  cancel(): void {
    this.inflight?.abort();
    this.inflight = null;
    this.revision++;
  }
}
