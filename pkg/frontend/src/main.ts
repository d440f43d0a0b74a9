/**
 * DOM wiring for the annotation page.  All decision logic lives in the
 * imported modules; this file only moves values between them and the DOM.
 *
 * Flow: load a reference image, click a positive point on the subject and a
 * negative point on the companion, watch the server's mask overlay update
 * live, export/upload the annotation, launch fine-tuning, then generate and
 * browse samples from the trained checkpoint.
 */

import { artifactUrl, postAnnotation, setBaseUrl, ApiError } from './api.js';
import {
  applyPreview,
  clickToPixel,
  createState,
  exportAnnotation,
  gridLinePositions,
  placePoint,
} from './annotation.js';
import type { CanvasState, Polarity } from './annotation.js';
import { PreviewController } from './preview.js';
import {
  canSubmit,
  clearBusy,
  createJobPanel,
  pollToCompletion,
  submit,
} from './jobs.js';
import type { JobPanelState } from './jobs.js';
import type { AnnotationJson } from './types.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

// ---------------------------------------------------------------------------
// page state

let state: CanvasState | null = null;
let polarity: Polarity = 'positive';
let panel: JobPanelState = createJobPanel();
let storedAnnotation: { path: string; image: string } | null = null;
let trainJobId: string | null = null;

const baseUrlInput = el<HTMLInputElement>('base-url');
const fileInput = el<HTMLInputElement>('image-file');
const wrap = el<HTMLDivElement>('canvas-wrap');
const baseImg = el<HTMLImageElement>('base-image');
const overlayImg = el<HTMLImageElement>('overlay-image');
const gridCanvas = el<HTMLCanvasElement>('grid-canvas');
const markerLayer = el<HTMLDivElement>('marker-layer');
const staleBadge = el<HTMLSpanElement>('stale-badge');
const banner = el<HTMLDivElement>('banner');
const warningsLine = el<HTMLDivElement>('warnings');
const opacitySlider = el<HTMLInputElement>('opacity');
const gridToggle = el<HTMLInputElement>('grid-toggle');
const exportHint = el<HTMLDivElement>('export-hint');
const uploadStatus = el<HTMLDivElement>('upload-status');
const trainButton = el<HTMLButtonElement>('train-btn');
const trainNote = el<HTMLDivElement>('train-note');
const generateButton = el<HTMLButtonElement>('generate-btn');
const checkpointInput = el<HTMLInputElement>('checkpoint');
const jobStatus = el<HTMLDivElement>('job-status');
const progressBar = el<HTMLDivElement>('progress-bar');
const gallery = el<HTMLDivElement>('gallery');

// default matches the `p3s serve` port
const DEFAULT_BASE_URL = 'http://127.0.0.1:8343';
setBaseUrl(localStorage.getItem('p3s-base-url') ?? DEFAULT_BASE_URL);
baseUrlInput.value = localStorage.getItem('p3s-base-url') ?? DEFAULT_BASE_URL;
baseUrlInput.addEventListener('change', () => {
  setBaseUrl(baseUrlInput.value);
  localStorage.setItem('p3s-base-url', baseUrlInput.value);
});

// ---------------------------------------------------------------------------
// preview plumbing

const previews = new PreviewController({
  onResult: (res) => {
    if (state === null) {
      return;
    }
    state = applyPreview(state, res);
    banner.textContent = '';
    warningsLine.textContent = res.warnings.join(' · ');
    render();
  },
  onError: (err) => {
    // the points stay where they are; only the overlay is in question
    banner.textContent = `Preview failed: ${err.message}`;
    render();
  },
});

function requestPreview(): void {
  // a preview needs at least the positive point; a lone negative point is
  // not a valid annotation yet
  if (state === null || state.positive === null) {
    return;
  }
  const annotation: AnnotationJson = {
    image: state.imageName,
    width: state.width,
    height: state.height,
    positive: state.positive,
    negative: state.negative,
    identifier: state.identifier,
  };
  previews.request(annotation, state.imageData);
}

// ---------------------------------------------------------------------------
// image loading: re-encode to PNG via a canvas so the bytes previewed inline
// and the bytes uploaded to the server are identical

fileInput.addEventListener('change', () => {
  const file = fileInput.files?.[0];
  if (file === undefined) {
    return;
  }
  const reader = new FileReader();
  reader.onload = () => {
    const probe = new Image();
    probe.onload = () => {
      const canvas = document.createElement('canvas');
      canvas.width = probe.naturalWidth;
      canvas.height = probe.naturalHeight;
      canvas.getContext('2d')!.drawImage(probe, 0, 0);
      const dataUrl = canvas.toDataURL('image/png');
      const name = file.name.replace(/\.[^.]+$/, '') + '.png';
      state = createState(name, canvas.width, canvas.height, dataUrl.split(',')[1] ?? null);
      previews.cancel();
      storedAnnotation = null;
      baseImg.src = dataUrl;
      banner.textContent = '';
      warningsLine.textContent = '';
      uploadStatus.textContent = '';
      render();
    };
    probe.src = String(reader.result);
  };
  reader.readAsDataURL(file);
});

// ---------------------------------------------------------------------------
// point placement

for (const value of ['positive', 'negative'] as const) {
  el<HTMLInputElement>(`polarity-${value}`).addEventListener('change', () => {
    polarity = value;
  });
}

wrap.addEventListener('click', (event) => {
  if (state === null) {
    return;
  }
  const rect = baseImg.getBoundingClientRect();
  const pixel = clickToPixel(
    event.clientX - rect.left,
    event.clientY - rect.top,
    rect.width,
    rect.height,
    state.width,
    state.height,
  );
  if (pixel === null) {
    return; // outside the displayed image: ignored, no request
  }
  const next = placePoint(state, polarity, pixel);
  if (next === null) {
    return;
  }
  state = next;
  render();
  requestPreview();
});

// ---------------------------------------------------------------------------
// rendering

opacitySlider.addEventListener('input', () => {
  if (state !== null) {
    state = { ...state, overlayOpacity: Number(opacitySlider.value) / 100 };
    render();
  }
});

gridToggle.addEventListener('change', () => {
  if (state !== null) {
    state = { ...state, gridVisible: gridToggle.checked };
    render();
  }
});

function render(): void {
  if (state === null) {
    return;
  }
  // overlay: server bytes verbatim; stale overlays are dimmed and badged
  if (state.overlayPng !== null) {
    overlayImg.src = `data:image/png;base64,${state.overlayPng}`;
    overlayImg.style.display = 'block';
    overlayImg.style.opacity = String(state.overlayOpacity);
    overlayImg.classList.toggle('stale', state.overlayStale);
  } else {
    overlayImg.style.display = 'none';
  }
  staleBadge.style.display = state.overlayStale && state.overlayPng !== null ? 'inline' : 'none';

  renderMarkers();
  renderGrid();
  renderPanel();
}

function renderMarkers(): void {
  if (state === null) {
    return;
  }
  markerLayer.textContent = '';
  const rect = baseImg.getBoundingClientRect();
  const points: Array<[Polarity, { x: number; y: number } | null]> = [
    ['positive', state.positive],
    ['negative', state.negative],
  ];
  for (const [kind, point] of points) {
    if (point === null) {
      continue;
    }
    const marker = document.createElement('div');
    marker.className = `marker ${kind}`;
    marker.style.left = `${((point.x + 0.5) / state.width) * rect.width}px`;
    marker.style.top = `${((point.y + 0.5) / state.height) * rect.height}px`;
    markerLayer.appendChild(marker);
  }
}

function renderGrid(): void {
  if (state === null) {
    return;
  }
  const rect = baseImg.getBoundingClientRect();
  gridCanvas.width = Math.round(rect.width);
  gridCanvas.height = Math.round(rect.height);
  const ctx = gridCanvas.getContext('2d')!;
  ctx.clearRect(0, 0, gridCanvas.width, gridCanvas.height);
  if (!state.gridVisible || state.gridSize === null) {
    return;
  }
  ctx.strokeStyle = 'rgba(255, 255, 255, 0.55)';
  ctx.lineWidth = 1;
  for (const x of gridLinePositions(gridCanvas.width, state.gridSize)) {
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, gridCanvas.height);
    ctx.stroke();
  }
  for (const y of gridLinePositions(gridCanvas.height, state.gridSize)) {
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(gridCanvas.width, y);
    ctx.stroke();
  }
}

// ---------------------------------------------------------------------------
// export / upload

function buildExport(): AnnotationJson | null {
  if (state === null) {
    exportHint.textContent = 'Load an image first.';
    return null;
  }
  let result = exportAnnotation(state);
  if (!result.ok && result.reason === 'confirm_single_subject') {
    if (!window.confirm(result.hint)) {
      return null;
    }
    result = exportAnnotation(state, { confirmSingleSubject: true });
  }
  if (!result.ok) {
    exportHint.textContent = result.hint;
    return null;
  }
  exportHint.textContent = '';
  return result.annotation;
}

el<HTMLButtonElement>('export-download').addEventListener('click', () => {
  const annotation = buildExport();
  if (annotation === null) {
    return;
  }
  const blob = new Blob([JSON.stringify(annotation, null, 2)], { type: 'application/json' });
  const link = document.createElement('a');
  link.href = URL.createObjectURL(blob);
  link.download = annotation.image.replace(/\.png$/, '') + '.annotation.json';
  link.click();
  URL.revokeObjectURL(link.href);
});

el<HTMLButtonElement>('export-upload').addEventListener('click', async () => {
  const annotation = buildExport();
  if (annotation === null || state === null) {
    return;
  }
  try {
    const res = await postAnnotation(annotation, state.imageData);
    storedAnnotation = { path: res.stored, image: res.annotation.image };
    uploadStatus.textContent = `Stored as ${res.stored} (image ${res.annotation.image})`;
    renderPanel();
  } catch (err) {
    const detail = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
    uploadStatus.textContent = `Upload failed — ${detail}`;
  }
});

// ---------------------------------------------------------------------------
// job panel

function renderPanel(): void {
  trainButton.disabled = !canSubmit(panel) || storedAnnotation === null;
  trainNote.textContent =
    panel.busyMessage ?? (storedAnnotation === null ? 'Upload an annotation to enable training.' : '');
  generateButton.disabled = !canSubmit(panel) || checkpointInput.value.trim() === '';

  if (panel.activeJob !== null) {
    const job = panel.activeJob;
    jobStatus.textContent = `${job.kind} ${job.id}: ${job.status}${job.error ? ` — ${job.error}` : ''}`;
    progressBar.style.width = `${Math.round(job.progress * 100)}%`;
  } else {
    jobStatus.textContent = panel.errorMessage ?? 'No job submitted yet.';
    progressBar.style.width = '0%';
  }
  if (panel.errorMessage !== null && panel.activeJob?.status !== 'failed') {
    jobStatus.textContent = panel.errorMessage;
  }

  gallery.textContent = '';
  for (const artifact of panel.gallery) {
    const img = document.createElement('img');
    img.src = artifactUrl(artifact.id);
    img.title = artifact.file;
    img.className = 'gallery-item';
    gallery.appendChild(img);
  }
}

function watchActiveJob(): void {
  void pollToCompletion(panel, (updated) => {
    panel = updated;
    if (
      trainJobId !== null &&
      panel.activeJob?.id === trainJobId &&
      panel.activeJob.status === 'done'
    ) {
      // point the generate form at the checkpoint this train job just wrote;
      // the service resolves the path against its asset root
      checkpointInput.value = `jobs/${trainJobId}/checkpoint_final.pt`;
    }
    renderPanel();
  }).catch((err) => {
    jobStatus.textContent = `Polling failed: ${err.message}`;
  });
}

trainButton.addEventListener('click', async () => {
  if (storedAnnotation === null) {
    return;
  }
  const config = {
    backbone: 'toy',
    identifier: state?.identifier ?? 'sks',
    epochs: Number(el<HTMLInputElement>('epochs').value),
    learning_rate: Number(el<HTMLInputElement>('learning-rate').value),
    data: [{ image: storedAnnotation.image, annotation: storedAnnotation.path }],
  };
  panel = await submit(panel, 'train', config);
  renderPanel();
  if (panel.busyMessage !== null) {
    // trainer occupied elsewhere: leave the button disabled with the
    // explanation visible, then allow a retry
    setTimeout(() => {
      panel = clearBusy(panel);
      renderPanel();
    }, 4000);
    return;
  }
  if (panel.activeJob !== null) {
    trainJobId = panel.activeJob.id;
    watchActiveJob();
  }
});

generateButton.addEventListener('click', async () => {
  const config = {
    prompt: el<HTMLInputElement>('prompt').value,
    checkpoint: checkpointInput.value.trim(),
    seed: Number(el<HTMLInputElement>('seed').value),
    steps: Number(el<HTMLInputElement>('steps').value),
    guidance_scale: Number(el<HTMLInputElement>('guidance').value),
    num_images: Number(el<HTMLInputElement>('num-images').value),
  };
  panel = await submit(panel, 'generate', config);
  renderPanel();
  if (panel.activeJob !== null && panel.busyMessage === null) {
    watchActiveJob();
  }
});

renderPanel();
