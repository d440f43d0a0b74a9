import { afterEach, beforeEach, describe, expect, it, vi } from 'vitest';

import { setBaseUrl } from '../src/api.js';
import {
  canSubmit,
  clearBusy,
  createJobPanel,
  imageArtifacts,
  isTerminal,
  pollToCompletion,
  refresh,
  submit,
} from '../src/jobs.js';
import type { JobArtifact, JobJson } from '../src/types.js';

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'content-type': 'application/json' },
  });
}

function job(overrides: Partial<JobJson> = {}): JobJson {
  return {
    id: 'abc123',
    kind: 'train',
    status: 'queued',
    progress: 0,
    artifacts: [],
    error: null,
    created: 1700000000,
    ...overrides,
  };
}

function artifact(file: string): JobArtifact {
  return { id: file.replace(/\W/g, '').slice(0, 16), file, sha256: 'f'.repeat(64) };
}

const fetchMock = vi.fn();

beforeEach(() => {
  setBaseUrl('http://svc.test');
  fetchMock.mockReset();
  vi.stubGlobal('fetch', fetchMock);
});

afterEach(() => {
  vi.unstubAllGlobals();
});

describe('submit', () => {
  it('stores the accepted job and blocks further submission while it is pending', async () => {
    fetchMock.mockResolvedValueOnce(jsonResponse(200, { schema_version: 1, job: job() }));
    let panel = createJobPanel();
    expect(canSubmit(panel)).toBe(true);

    panel = await submit(panel, 'train', { backbone: 'toy', epochs: 2 });
    expect(panel.activeJob?.id).toBe('abc123');
    expect(panel.errorMessage).toBeNull();
    expect(canSubmit(panel)).toBe(false);

    const [url, init] = fetchMock.mock.calls[0]!;
    expect(url).toBe('http://svc.test/jobs');
    expect(JSON.parse(init.body)).toEqual({
      kind: 'train',
      config: { backbone: 'toy', epochs: 2 },
    });
  });

  it('turns a 409 trainer_busy refusal into a disabled button with an explanation', async () => {
    fetchMock.mockResolvedValueOnce(
      jsonResponse(409, {
        schema_version: 1,
        error: { code: 'trainer_busy', message: 'a training job is already queued or running' },
      }),
    );
    let panel = await submit(createJobPanel(), 'train', { backbone: 'toy' });
    expect(panel.busyMessage).toBe(
      'Training unavailable: a training job is already queued or running',
    );
    expect(canSubmit(panel)).toBe(false);
    expect(panel.errorMessage).toBeNull();

    panel = clearBusy(panel);
    expect(canSubmit(panel)).toBe(true);
  });

  it('surfaces any other refusal as an error and leaves submission enabled', async () => {
    fetchMock.mockResolvedValueOnce(
      jsonResponse(400, {
        schema_version: 1,
        error: { code: 'bad_config', message: 'epochs must be >= 1' },
      }),
    );
    const panel = await submit(createJobPanel(), 'train', { backbone: 'toy', epochs: 0 });
    expect(panel.errorMessage).toBe('epochs must be >= 1');
    expect(panel.busyMessage).toBeNull();
    expect(canSubmit(panel)).toBe(true);
  });
});

describe('refresh', () => {
  it('mirrors the job lifecycle queued -> running -> done', async () => {
    fetchMock.mockResolvedValueOnce(jsonResponse(200, { schema_version: 1, job: job() }));
    let panel = await submit(createJobPanel(), 'generate', { prompt: 'p', checkpoint: 'c' });
    expect(panel.activeJob?.status).toBe('queued');

    fetchMock.mockResolvedValueOnce(
      jsonResponse(200, { schema_version: 1, job: job({ status: 'running', progress: 0.5 }) }),
    );
    panel = await refresh(panel);
    expect(panel.activeJob?.status).toBe('running');
    expect(panel.activeJob?.progress).toBe(0.5);
    expect(fetchMock.mock.calls[1]![0]).toBe('http://svc.test/jobs/abc123');

    const artifacts = [
      artifact('sample_000.png'),
      artifact('sample_001.png'),
      artifact('sample_002.png'),
      artifact('manifest.json'),
    ];
    fetchMock.mockResolvedValueOnce(
      jsonResponse(200, {
        schema_version: 1,
        job: job({ status: 'done', progress: 1.0, artifacts }),
      }),
    );
    panel = await refresh(panel);
    expect(panel.activeJob?.status).toBe('done');
    // gallery shows exactly the generated images, not bookkeeping files
    expect(panel.gallery.map((a) => a.file)).toEqual([
      'sample_000.png',
      'sample_001.png',
      'sample_002.png',
    ]);
  });

  it('shows the job record error when a job fails', async () => {
    fetchMock.mockResolvedValueOnce(jsonResponse(200, { schema_version: 1, job: job() }));
    let panel = await submit(createJobPanel(), 'train', { backbone: 'toy' });

    fetchMock.mockResolvedValueOnce(
      jsonResponse(200, {
        schema_version: 1,
        job: job({ status: 'failed', error: "checkpoint file 'missing.pt' not found" }),
      }),
    );
    panel = await refresh(panel);
    expect(panel.activeJob?.status).toBe('failed');
    expect(panel.errorMessage).toBe("checkpoint file 'missing.pt' not found");
    expect(canSubmit(panel)).toBe(true);
  });

  it('does not call the server when there is nothing to poll', async () => {
    let panel = createJobPanel();
    expect(await refresh(panel)).toBe(panel);

    panel = { ...panel, activeJob: job({ status: 'done' }) };
    expect(await refresh(panel)).toBe(panel);
    expect(fetchMock).not.toHaveBeenCalled();
  });
});

describe('imageArtifacts', () => {
  it('keeps image files only', () => {
    const record = job({
      artifacts: [
        artifact('sample_000.png'),
        artifact('photo.JPG'),
        artifact('manifest.json'),
        artifact('checkpoint_final.pt'),
        artifact('metrics.jsonl'),
      ],
    });
    expect(imageArtifacts(record).map((a) => a.file)).toEqual(['sample_000.png', 'photo.JPG']);
  });
});

describe('isTerminal', () => {
  it('treats done and failed as terminal, queued and running as live', () => {
    expect(isTerminal('done')).toBe(true);
    expect(isTerminal('failed')).toBe(true);
    expect(isTerminal('queued')).toBe(false);
    expect(isTerminal('running')).toBe(false);
  });
});

describe('pollToCompletion', () => {
  it('polls until the job is terminal and reports every update', async () => {
    fetchMock.mockResolvedValueOnce(jsonResponse(200, { schema_version: 1, job: job() }));
    const panel = await submit(createJobPanel(), 'train', { backbone: 'toy' });

    fetchMock
      .mockResolvedValueOnce(
        jsonResponse(200, { schema_version: 1, job: job({ status: 'running', progress: 0.3 }) }),
      )
      .mockResolvedValueOnce(
        jsonResponse(200, { schema_version: 1, job: job({ status: 'running', progress: 0.8 }) }),
      )
      .mockResolvedValueOnce(
        jsonResponse(200, {
          schema_version: 1,
          job: job({ status: 'done', progress: 1.0, artifacts: [artifact('sample_000.png')] }),
        }),
      );

    const statuses: string[] = [];
    const final = await pollToCompletion(
      panel,
      (p) => statuses.push(p.activeJob?.status ?? 'none'),
      5,
    );
    expect(statuses).toEqual(['running', 'running', 'done']);
    expect(final.activeJob?.status).toBe('done');
    expect(final.gallery).toHaveLength(1);
  });

  it('rejects when polling itself fails', async () => {
    fetchMock.mockResolvedValueOnce(jsonResponse(200, { schema_version: 1, job: job() }));
    const panel = await submit(createJobPanel(), 'train', { backbone: 'toy' });

    fetchMock.mockRejectedValueOnce(new TypeError('network down'));
    await expect(pollToCompletion(panel, () => undefined, 5)).rejects.toThrow('network down');
  });
});
