"""HTTP curation service: candidate review, retrain jobs, report retrieval.

One service instance owns one project directory:

    project/
      manifest.json         base corpus manifest
      store.json            curation store (written through on every mutation)
      model.ckpt            classifier used for thumbnails/retrain defaults
      train_config.json     optional TrainConfig for retrain jobs
      runs/<run-id>/        eval.json, tsne.csv, cam overlays per run

Mutations serialize through one lock; retrain jobs run on a worker thread and
are polled via /api/jobs/{job_id}. Every error response carries
{"error_code": ..., "message": ...}.
"""

from __future__ import annotations

import io
import json
import threading
import traceback
import uuid
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .classifier import TrainConfig, build_classifier, evaluate, finetune, load_classifier
from .curation import auto_select, export_accepted, load_store, record_decision, save_store
from .dataset import DefectClass, load_manifest, read_image
from .errors import (
    CheckpointError,
    ConfigError,
    ManifestError,
    NotFoundError,
    RailDefectError,
    ValidationError,
)
from .gradcam import grad_cam, overlay

ERROR_CODES = {
    NotFoundError: ("not_found", 404),
    ValidationError: ("validation_error", 400),
    ConfigError: ("config_error", 400),
    ManifestError: ("manifest_error", 400),
    CheckpointError: ("checkpoint_error", 400),
}


class DecisionBody(BaseModel):
    id: str
    status: str


class SelectBody(BaseModel):
    k: int


class RetrainBody(BaseModel):
    manifest: str


class ServiceState:
    """Mutable service-side state behind a single writer lock."""

    def __init__(self, project_dir: Path):
        self.project_dir = project_dir
        self.lock = threading.Lock()
        self.manifest = load_manifest(project_dir / "manifest.json")
        self.store = load_store(project_dir / "store.json")
        self.jobs: dict[str, dict] = {}
        self._model = None

    def model(self):
        if self._model is None:
            self._model = load_classifier(self.project_dir / "model.ckpt")
        return self._model

    def persist_store(self) -> None:
        save_store(self.store, self.project_dir / "store.json")

    def train_config(self, seed_default: int = 0) -> TrainConfig:
        path = self.project_dir / "train_config.json"
        if path.is_file():
            return TrainConfig.from_json(json.loads(path.read_text()))
        return TrainConfig(epochs=1, seed=seed_default)


def _candidate_json(cand) -> dict:
    return {
        "id": cand.record.id,
        "similarity": cand.similarity,
        "status": cand.status,
        "decided_at": cand.decided_at,
        "source_id": cand.record.source_id,
        "thumbnail_url": f"/api/images/{cand.record.id}",
        "source_url": f"/api/images/{cand.record.source_id}"
        if cand.record.source_id
        else None,
        "zero_norm_warning": cand.zero_norm_warning,
    }


def _run_retrain(state: ServiceState, job_id: str, manifest_path: Path) -> None:
    job = state.jobs[job_id]
    job["state"] = "running"
    try:
        manifest = load_manifest(manifest_path)
        config = state.train_config()
        model = build_classifier(
            state.model().backbone_cfg,
            seed=config.seed,
            input_size=manifest.image_size,
        )
        model, _ = finetune(model, manifest, config)
        report = evaluate(model, manifest, split="test")
        run_dir = state.project_dir / "runs" / job_id
        run_dir.mkdir(parents=True, exist_ok=True)
        report.save(run_dir / "eval.json")
        job["eval_report"] = report.to_json()
        job["state"] = "done"
    except Exception as e:  # failures surface through the polled status
        job["state"] = "failed"
        job["message"] = f"{type(e).__name__}: {e}"
        job["trace"] = traceback.format_exc(limit=3)


def create_app(project_dir: Path | str, static_dir: Optional[Path | str] = None) -> FastAPI:
    """Build the service over an existing project directory."""
    state = ServiceState(Path(project_dir))
    app = FastAPI(title="candidate curation service")
    app.state.service = state

    @app.exception_handler(RailDefectError)
    async def on_pipeline_error(request: Request, exc: RailDefectError):
        code, status = ERROR_CODES.get(type(exc), ("internal_error", 500))
        return JSONResponse(
            status_code=status,
            content={"error_code": code, "message": str(exc)},
        )

    @app.exception_handler(RequestValidationError)
    async def on_request_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"error_code": "invalid_request", "message": str(exc.errors())},
        )

    @app.get("/api/candidates")
    def list_candidates(
        status: Optional[str] = None,
        sort: str = "similarity",
        page: int = 1,
        page_size: int = 50,
    ):
        if sort != "similarity":
            raise ValidationError(f"unsupported sort {sort!r}")
        if status is not None and status not in ("pending", "accepted", "rejected"):
            raise ValidationError(f"unknown status filter {status!r}")
        if page < 1 or page_size < 1:
            raise ValidationError("page and page_size must be >= 1")
        items = state.store.ordered()
        if status is not None:
            items = [c for c in items if c.status == status]
        total = len(items)
        start = (page - 1) * page_size
        chunk = items[start : start + page_size]
        return {
            "items": [_candidate_json(c) for c in chunk],
            "total": total,
            "page": page,
            "page_size": page_size,
        }

    @app.get("/api/images/{image_id}")
    def get_image(image_id: str):
        if image_id in state.store.candidates:
            rec = state.store.candidates[image_id].record
        else:
            rec = next((r for r in state.manifest.records if r.id == image_id), None)
            if rec is None:
                raise NotFoundError(f"unknown image id {image_id!r}")
        path = state.manifest.resolve(rec)
        if not path.is_file():
            raise NotFoundError(f"image file missing for id {image_id!r}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/api/decisions")
    def post_decision(body: DecisionBody):
        with state.lock:
            cand = record_decision(state.store, body.id, body.status)
            state.persist_store()
        return _candidate_json(cand)

    @app.post("/api/select")
    def post_select(body: SelectBody):
        with state.lock:
            chosen = auto_select(state.store, body.k)
            state.persist_store()
        return {"accepted": [c.record.id for c in chosen], "count": len(chosen)}

    @app.post("/api/export")
    def post_export():
        with state.lock:
            out = state.project_dir / "manifest_augmented.json"
            augmented = export_accepted(state.store, state.manifest, out_path=out)
        return {
            "manifest_path": str(out),
            "shelling_train_count": augmented.count("train", DefectClass.SHELLING),
        }

    @app.post("/api/jobs/retrain")
    def post_retrain(body: RetrainBody):
        manifest_path = Path(body.manifest)
        if not manifest_path.is_absolute():
            manifest_path = state.project_dir / manifest_path
        if not manifest_path.is_file():
            raise NotFoundError(f"manifest not found: {manifest_path}")
        job_id = uuid.uuid4().hex[:12]
        state.jobs[job_id] = {"state": "queued"}
        thread = threading.Thread(
            target=_run_retrain, args=(state, job_id, manifest_path), daemon=True
        )
        thread.start()
        return {"job_id": job_id, "state": "queued"}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise NotFoundError(f"unknown job id {job_id!r}")
        out = {"job_id": job_id, "state": job["state"]}
        if job["state"] == "done":
            out["eval_report"] = job["eval_report"]
        if job["state"] == "failed":
            out["message"] = job.get("message", "")
        return out

    @app.get("/api/reports/eval")
    def get_eval(run: str):
        path = state.project_dir / "runs" / run / "eval.json"
        if not path.is_file():
            raise NotFoundError(f"no eval report for run {run!r}")
        return json.loads(path.read_text())

    @app.get("/api/reports/cam/{image_id}")
    def get_cam(
        image_id: str,
        target: Optional[int] = Query(None, alias="class", ge=0, le=3),
    ):
        rec = next((r for r in state.manifest.records if r.id == image_id), None)
        if rec is None and image_id in state.store.candidates:
            rec = state.store.candidates[image_id].record
        if rec is None:
            raise NotFoundError(f"unknown image id {image_id!r}")
        cls = DefectClass(target) if target is not None else DefectClass(rec.label)
        image = read_image(state.manifest.resolve(rec))
        hm = grad_cam(state.model(), image, cls, image_id=image_id)
        rgb = overlay(hm, image)
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/api/reports/tsne")
    def get_tsne(run: str):
        path = state.project_dir / "runs" / run / "tsne.csv"
        if not path.is_file():
            raise NotFoundError(f"no embedding for run {run!r}")
        points = []
        lines = path.read_text().strip().splitlines()
        for line in lines[1:]:
            image_id, x, y, label = line.split(",")
            points.append(
                {"id": image_id, "x": float(x), "y": float(y), "label": int(label)}
            )
        return {"run": run, "points": points}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
