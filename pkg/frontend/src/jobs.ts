/**
 * Job-panel state: submit train/generate/evaluate jobs, mirror their status
 * by polling, and collect image artifacts for the gallery when they finish.
 *
 * Transitions take the old state and return a new one, so the panel logic is
 * testable without DOM or timers.
 */

import { ApiError, getJob, submitJob } from './api.js';
import type { JobArtifact, JobJson, JobKind, JobStatus } from './types.js';

export interface JobPanelState {
  activeJob: JobJson | null;
  /** Set when the server refused a train submission with 409 trainer_busy. */
  busyMessage: string | null;
  /** Submission or job-execution error surfaced to the user. */
  errorMessage: string | null;
  /** Image artifacts of the last job that finished successfully. */
  gallery: JobArtifact[];
}

export function createJobPanel(): JobPanelState {
  return { activeJob: null, busyMessage: null, errorMessage: null, gallery: [] };
}

export function isTerminal(status: JobStatus): boolean {
  return status === 'done' || status === 'failed';
}

/** Submission stays blocked while a job is pending or the trainer was reported busy. */
export function canSubmit(panel: JobPanelState): boolean {
  if (panel.busyMessage !== null) {
    return false;
  }
  return panel.activeJob === null || isTerminal(panel.activeJob.status);
}

/** Re-enable submission after a trainer-busy refusal (e.g. to retry later). */
export function clearBusy(panel: JobPanelState): JobPanelState {
  return { ...panel, busyMessage: null };
}

const IMAGE_EXTENSIONS = ['.png', '.jpg', '.jpeg'];

export function imageArtifacts(job: JobJson): JobArtifact[] {
  return job.artifacts.filter((a) =>
    IMAGE_EXTENSIONS.some((ext) => a.file.toLowerCase().endsWith(ext)),
  );
}

/**
 * Submit a job.  A 409 trainer_busy refusal becomes a busyMessage (disabled
 * button with an explanation); any other failure becomes an errorMessage and
 * leaves submission enabled so the config can be fixed and retried.
 */
export async function submit(
  panel: JobPanelState,
  kind: JobKind,
  config: Record<string, unknown>,
): Promise<JobPanelState> {
  try {
    const job = await submitJob(kind, config);
    return { ...panel, activeJob: job, busyMessage: null, errorMessage: null };
  } catch (err) {
    if (err instanceof ApiError && err.status === 409 && err.code === 'trainer_busy') {
      return { ...panel, busyMessage: `Training unavailable: ${err.message}` };
    }
    const message = err instanceof Error ? err.message : String(err);
    return { ...panel, errorMessage: message };
  }
}

/** Fetch the active job's current record and fold the update into the panel. */
export async function refresh(panel: JobPanelState): Promise<JobPanelState> {
  if (panel.activeJob === null || isTerminal(panel.activeJob.status)) {
    return panel;
  }
  const job = await getJob(panel.activeJob.id);
  const next: JobPanelState = { ...panel, activeJob: job };
  if (job.status === 'done') {
    next.gallery = imageArtifacts(job);
    next.busyMessage = null;
  } else if (job.status === 'failed') {
    next.errorMessage = job.error ?? 'job failed';
    next.busyMessage = null;
  }
  return next;
}

/**
 * Poll the active job until it reaches a terminal status, reporting each
 * update.  Resolves with the final panel state; rejects if polling itself
 * fails (e.g. the service went away).
 */
export function pollToCompletion(
  panel: JobPanelState,
  onUpdate: (panel: JobPanelState) => void,
  intervalMs = 500,
): Promise<JobPanelState> {
  return new Promise((resolve, reject) => {
    let current = panel;
    let ticking = false;
    const timer = setInterval(async () => {
      if (ticking) {
        return; // a slow response must not pile up overlapping polls
      }
      ticking = true;
      try {
        current = await refresh(current);
        onUpdate(current);
        if (current.activeJob === null || isTerminal(current.activeJob.status)) {
          clearInterval(timer);
          resolve(current);
        }
      } catch (err) {
        clearInterval(timer);
        reject(err instanceof Error ? err : new Error(String(err)));
      } finally {
        ticking = false;
      }
    }, intervalMs);
  });
}
