"""Local HTTP API that the annotation UI drives.

Mask preview is synchronous and stateless: the UI needs the overlay within
the same click, and the pipeline is sub-second at toy grid sizes.  Training,
generation and evaluation run as jobs on a single worker thread, which makes
the one-trainer-at-a-time rule structural; a second train submission while
one is queued or running is refused with 409 rather than silently serialized,
so the UI can tell the user instead of stacking hour-long runs.  Jobs are not
persisted: the artifact files under the asset root are the durable output and
any job is re-creatable from its config.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import queue
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from .backbone import BackboneBundle, build_backbone, to_float_image
from .errors import (
    AnnotationError,
    ConfigError,
    InputError,
    P3SError,
    ParameterError,
    StateError,
)
from .evaluation import EvalProtocol, run_benchmark
from .masking import (
    MaskConfig,
    PointAnnotation,
    extract_negative_mask,
    render_mask_overlay,
)
from .sampling import SampleRequest, generate
from .training import TrainConfig, fine_tune

API_SCHEMA_VERSION = 1

JOB_KINDS = ("train", "generate", "evaluate")

# forward-only lattice; done and failed are both terminal
_STATUS_ORDER = {"queued": 0, "running": 1, "done": 2, "failed": 2}


class TrainerBusyError(P3SError):
    code = "trainer_busy"


@dataclass
class Job:
    """One queued unit of work and its whole visible lifecycle."""

    id: str
    kind: str
    config: dict
    status: str = "queued"
    progress: float = 0.0
    artifacts: list = field(default_factory=list)
    error: Optional[str] = None
    created: float = field(default_factory=time.time)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def advance(self, status: str):
        with self._lock:
            if _STATUS_ORDER[status] < _STATUS_ORDER[self.status]:
                raise StateError(f"job {self.id}: {self.status} -> {status} moves backward")
            self.status = status
            if status == "done":
                self.progress = 1.0

    def set_progress(self, value: float):
        with self._lock:
            # monotone and clamped; stale callbacks can never rewind the bar
            self.progress = min(1.0, max(self.progress, float(value)))

    def to_json(self) -> dict:
        with self._lock:
            return {
                "id": self.id,
                "kind": self.kind,
                "status": self.status,
                "progress": self.progress,
                "artifacts": list(self.artifacts),
                "error": self.error,
                "created": self.created,
            }


class JobRunner:
    """Single-worker job queue with an artifact registry."""

    def __init__(self, backbone: BackboneBundle, asset_root: Path):
        self.backbone = backbone
        self.asset_root = Path(asset_root)
        self.jobs: dict = {}
        self.artifacts: dict = {}
        self._queue: "queue.Queue" = queue.Queue()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._worker = threading.Thread(target=self._run, name="p3s-jobs", daemon=True)
        self._worker.start()

    def submit(self, kind: str, config: dict) -> Job:
        if kind not in JOB_KINDS:
            raise ParameterError(f"unknown job kind '{kind}'; expected one of {JOB_KINDS}")
        self._validate(kind, config)
        with self._lock:
            if kind == "train" and any(
                j.kind == "train" and j.status in ("queued", "running")
                for j in self.jobs.values()
            ):
                raise TrainerBusyError("a training job is already queued or running")
            job = Job(id=uuid.uuid4().hex[:12], kind=kind, config=dict(config))
            self.jobs[job.id] = job
        self._queue.put(job.id)
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self.jobs.get(job_id)

    def artifact_path(self, artifact_id: str) -> Optional[Path]:
        with self._lock:
            return self.artifacts.get(artifact_id)

    def _resolve(self, value: str) -> str:
        """Resolve a job-config file path against the asset root.

        The annotations endpoint hands the browser asset-root-relative paths
        ("annotations/ab.json", "images/cd.png"), so job configs may reference
        files the same way; absolute paths and paths that do not exist under
        the asset root pass through untouched.
        """
        p = Path(value)
        if not p.is_absolute() and (self.asset_root / p).exists():
            return str(self.asset_root / p)
        return str(value)

    def wait_idle(self, timeout: float = 60.0) -> bool:
        """Block until every submitted job reached a terminal status."""
        deadline = time.time() + timeout
        while time.time() < deadline:
            with self._lock:
                pending = [j for j in self.jobs.values() if j.status in ("queued", "running")]
            if not pending:
                return True
            time.sleep(0.02)
        return False

    def stop(self):
        self._stop.set()

    # validation happens at submit time so a malformed config is a 400,
    # not a job that fails minutes later
    def _validate(self, kind: str, config: dict):
        if kind == "train":
            cfg = TrainConfig.from_json(config)
            if cfg.backbone != self.backbone.name:
                raise ConfigError(
                    f"config requests backbone '{cfg.backbone}' but the service "
                    f"runs '{self.backbone.name}'")
        elif kind == "generate":
            payload = {k: v for k, v in config.items() if k != "out_dir"}
            SampleRequest.from_json(payload)
        else:
            if "protocol" not in config:
                raise ConfigError("evaluate config needs a 'protocol' object")
            EvalProtocol.from_json(config["protocol"])
            if not isinstance(config.get("checkpoints", {}), dict):
                raise ConfigError("'checkpoints' must map class name to checkpoint path")

    def _run(self):
        while not self._stop.is_set():
            try:
                job_id = self._queue.get(timeout=0.1)
            except queue.Empty:
                continue
            job = self.get(job_id)
            job.advance("running")
            try:
                out_dir = self.asset_root / "jobs" / job.id
                self._execute(job, out_dir)
                self._register_artifacts(job, out_dir)
                if not job.artifacts:
                    raise StateError("job produced no artifacts")
                job.advance("done")
            except Exception as exc:  # a failed job must surface, not kill the worker
                job.error = str(exc)
                job.advance("failed")

    def _execute(self, job: Job, out_dir: Path):
        if job.kind == "train":
            cfg = TrainConfig.from_json(job.config)
            cfg.out_dir = str(out_dir)  # artifacts live under the job dir
            cfg.data = [
                {k: (self._resolve(v) if k in ("image", "annotation") else v)
                 for k, v in entry.items()}
                for entry in cfg.data
            ]
            fine_tune(cfg, self.backbone, progress_cb=job.set_progress)
        elif job.kind == "generate":
            payload = {k: v for k, v in job.config.items() if k != "out_dir"}
            if "checkpoint" in payload:
                payload["checkpoint"] = self._resolve(payload["checkpoint"])
            generate(SampleRequest.from_json(payload), self.backbone, out_dir=out_dir)
        else:
            proto_json = dict(job.config["protocol"])
            if isinstance(proto_json.get("classes"), list):
                proto_json["classes"] = [self._resolve(c) for c in proto_json["classes"]]
            protocol = EvalProtocol.from_json(proto_json)
            checkpoints = {k: Path(self._resolve(v))
                           for k, v in job.config.get("checkpoints", {}).items()}
            run_benchmark(protocol, checkpoints, self.backbone, out_dir=out_dir)

    def _register_artifacts(self, job: Job, out_dir: Path):
        if not out_dir.is_dir():
            return
        for path in sorted(p for p in out_dir.rglob("*") if p.is_file()):
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            art_id = digest[:16]
            with self._lock:
                self.artifacts[art_id] = path
            job.artifacts.append({
                "id": art_id,
                "file": str(path.relative_to(out_dir)),
                "sha256": digest,
            })


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"schema_version": API_SCHEMA_VERSION,
                 "error": {"code": code, "message": message}},
    )


def _decode_image(payload: dict, annotation: PointAnnotation, asset_root: Path) -> np.ndarray:
    """Inline base64 image data wins; otherwise resolve image_ref on disk."""
    from PIL import Image

    data = payload.get("image_data")
    if data is not None:
        try:
            raw = base64.b64decode(data, validate=True)
            with Image.open(io.BytesIO(raw)) as im:
                arr = np.asarray(im.convert("RGB"))
        except P3SError:
            raise
        except Exception as exc:
            raise InputError(f"image_data is not a decodable image: {exc}") from exc
    else:
        path = (asset_root / annotation.image_ref).resolve()
        if not str(path).startswith(str(asset_root.resolve()) + os.sep):
            raise InputError(f"image_ref '{annotation.image_ref}' escapes the asset root")
        if not path.is_file():
            raise InputError(f"image '{annotation.image_ref}' not found under the asset root")
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    image = to_float_image(arr)
    if image.shape[:2] != tuple(annotation.image_dims):
        raise AnnotationError(
            f"annotation dims {annotation.image_dims} do not match image {image.shape[:2]}")
    return image


def _mask_config(payload: dict) -> MaskConfig:
    known = {f: payload[f] for f in (
        "sigma", "truncate", "otsu_bins", "dilation_patches",
        "polarity", "inpaint_prompt") if f in payload}
    unknown = set(payload) - set(known)
    if unknown:
        raise ParameterError(f"unknown mask params: {sorted(unknown)}")
    return MaskConfig(**known)


def _png_b64(array: np.ndarray, bit: bool = False) -> str:
    from PIL import Image

    buf = io.BytesIO()
    if bit:
        Image.fromarray(array).convert("1").save(buf, format="PNG")
    else:
        Image.fromarray((array * 255).round().astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(backbone: BackboneBundle | None = None, asset_root: Path | None = None) -> FastAPI:
    """Assemble the service around one backbone and one asset directory."""
    if asset_root is None:
        asset_root = Path(os.environ.get("P3S_ASSET_ROOT", "assets"))
    asset_root = Path(asset_root)
    asset_root.mkdir(parents=True, exist_ok=True)
    if backbone is None:
        backbone = build_backbone("toy")
    runner = JobRunner(backbone, asset_root)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        runner.stop()

    app = FastAPI(title="p3s", version=str(API_SCHEMA_VERSION), lifespan=lifespan)
    # single-user local tool; the browser UI may be served from another port
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    app.state.runner = runner
    app.state.backbone = backbone
    app.state.asset_root = asset_root

    @app.exception_handler(P3SError)
    async def handle_p3s_error(request, exc: P3SError):
        status = 409 if isinstance(exc, TrainerBusyError) else 400
        return _error_response(status, exc.code, str(exc))

    @app.post("/annotations")
    def post_annotation(body: dict):
        if "annotation" not in body:
            raise AnnotationError("body needs an 'annotation' object")
        annotation = PointAnnotation.from_json(body["annotation"])
        if body.get("image_data") is not None:
            raw = base64.b64decode(body["image_data"], validate=True)
            digest = hashlib.sha256(raw).hexdigest()[:16]
            image_rel = f"images/{digest}.png"
            image_path = asset_root / image_rel
            image_path.parent.mkdir(parents=True, exist_ok=True)
            image_path.write_bytes(raw)
            annotation.image_ref = image_rel
        ann_id = hashlib.sha256(
            json.dumps(annotation.to_json(), sort_keys=True).encode()).hexdigest()[:16]
        ann_path = asset_root / "annotations" / f"{ann_id}.json"
        ann_path.parent.mkdir(parents=True, exist_ok=True)
        ann_path.write_text(json.dumps(annotation.to_json(), indent=2))
        return {
            "schema_version": API_SCHEMA_VERSION,
            "id": ann_id,
            "annotation": annotation.to_json(),
            "stored": str(ann_path.relative_to(asset_root)),
        }

    @app.post("/mask-preview")
    def post_mask_preview(body: dict):
        if "annotation" not in body:
            raise AnnotationError("body needs an 'annotation' object")
        annotation = PointAnnotation.from_json(body["annotation"])
        config = _mask_config(body.get("params", {}))
        image = _decode_image(body, annotation, asset_root)
        enc = backbone.patch_encoder.encode(image)
        extraction = extract_negative_mask(annotation, enc, config)
        overlay = render_mask_overlay(image, extraction.pixel_mask)
        return {
            "schema_version": API_SCHEMA_VERSION,
            "mask_png": _png_b64(extraction.pixel_mask.bits, bit=True),
            "overlay_png": _png_b64(overlay),
            "grid": {
                "grid_size": extraction.grid_size,
                "patch_cells": None if extraction.patch_mask is None
                else extraction.patch_mask.cells.astype(int).tolist(),
                "seed_patch": list(extraction.seed_patch) if extraction.seed_patch else None,
                "positive_patch": list(extraction.positive_patch),
            },
            "params": config.to_json(),
            "single_subject": extraction.single_subject,
            "warnings": extraction.warnings,
        }

    @app.post("/jobs")
    def post_job(body: dict):
        kind = body.get("kind")
        if kind is None:
            raise ParameterError("body needs a 'kind' field")
        config = body.get("config")
        if not isinstance(config, dict):
            raise ConfigError("body needs a 'config' object")
        job = runner.submit(kind, config)
        return {"schema_version": API_SCHEMA_VERSION, "job": job.to_json()}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = runner.get(job_id)
        if job is None:
            return _error_response(404, "unknown_job", f"no job '{job_id}'")
        return {"schema_version": API_SCHEMA_VERSION, "job": job.to_json()}

    @app.get("/artifacts/{artifact_id}")
    def get_artifact(artifact_id: str):
        path = runner.artifact_path(artifact_id)
        if path is None or not path.is_file():
            return _error_response(404, "unknown_artifact", f"no artifact '{artifact_id}'")
        return FileResponse(path)

    return app
