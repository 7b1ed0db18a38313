"""HTTP review service for the mask screening loop.

All mutation goes through the append-only journal: a decision is fsynced to
disk before the response is sent, and in-memory state is updated only after
the append succeeds, so any acknowledged verdict survives a crash. Reads
serve from the replayed in-memory manifest.
"""

from __future__ import annotations

import io
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import corpus as corpus_mod
from .corpus import Manifest, SampleRecord, ScreeningDecision
from .raster import load_gray, load_rgb, normalize_percentile

DEFAULT_ALPHA = 0.45
DEFAULT_PAGE = 50
OVERLAY_TINT = np.array([60.0, 220.0, 60.0])


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"error": message, "code": code})


def _sample_view(s: SampleRecord) -> dict:
    view = {
        "id": s.id,
        "status": s.status,
        "image_url": f"/api/samples/{s.id}/image.png",
        "depth_url": f"/api/samples/{s.id}/depth.png",
        "overlay_url": f"/api/samples/{s.id}/overlay.png",
    }
    if s.coverage is not None:
        view["coverage"] = s.coverage
    return view


def _png_response(array: np.ndarray) -> Response:
    img = Image.fromarray(array)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def create_app(manifest_path: str, journal_path: str, static_dir: str | None = None) -> FastAPI:
    manifest: Manifest = corpus_mod.load_manifest(manifest_path)
    manifest = corpus_mod.replay_journal(journal_path, manifest)
    corpus_mod.coverage_stats(manifest)
    write_lock = threading.Lock()

    app = FastAPI(title="cropseg review service")

    @app.exception_handler(HTTPException)
    async def _http_error(request: Request, exc: HTTPException):
        detail = exc.detail
        if not isinstance(detail, dict):
            detail = {"error": str(detail), "code": "error"}
        return JSONResponse(status_code=exc.status_code, content=detail)

    def _get_sample(sample_id: str) -> SampleRecord:
        s = manifest.by_id(sample_id)
        if s is None:
            raise _error(404, "unknown_sample", f"no sample with id {sample_id!r}")
        return s

    @app.get("/api/samples")
    def list_samples(status: str | None = None, limit: int = DEFAULT_PAGE, after: str | None = None):
        if status is not None and status not in corpus_mod.STATUSES:
            raise _error(400, "bad_status", f"unknown status {status!r}")
        if limit < 1:
            raise _error(400, "bad_limit", "limit must be >= 1")
        ordered = sorted(manifest.samples, key=lambda s: s.id)
        if after is not None:
            ordered = [s for s in ordered if s.id > after]
        if status is not None:
            ordered = [s for s in ordered if s.status == status]
        page = ordered[:limit]
        next_cursor = page[-1].id if len(ordered) > limit else None
        return {"samples": [_sample_view(s) for s in page], "next": next_cursor}

    @app.get("/api/samples/{sample_id}")
    def get_sample(sample_id: str):
        return _sample_view(_get_sample(sample_id))

    @app.post("/api/samples/{sample_id}/decision")
    def post_decision(sample_id: str, body: dict):
        s = _get_sample(sample_id)
        verdict = body.get("verdict")
        if verdict not in corpus_mod.VERDICTS:
            raise _error(400, "bad_verdict", f"verdict must be one of {corpus_mod.VERDICTS}")
        operator = str(body.get("operator", ""))
        decision = ScreeningDecision(sample_id=sample_id, verdict=verdict, operator=operator)
        with write_lock:
            try:
                corpus_mod.record_decision(journal_path, decision)
            except OSError as exc:
                raise _error(409, "journal_append_failed", str(exc))
            if verdict == "full_coverage":
                try:
                    corpus_mod.assign_full_coverage(s)
                except (OSError, ValueError) as exc:
                    # the verdict is journaled; surface the mask failure
                    raise _error(409, "full_coverage_failed", str(exc))
            else:
                s.status = "accepted" if verdict == "accept" else "rejected"
        return _sample_view(s)

    @app.get("/api/samples/{sample_id}/image.png")
    def get_image(sample_id: str):
        s = _get_sample(sample_id)
        if not Path(s.image_path).is_file():
            raise _error(404, "missing_asset", f"image for {sample_id} not found")
        return FileResponse(s.image_path, media_type="image/png")

    @app.get("/api/samples/{sample_id}/depth.png")
    def get_depth(sample_id: str):
        s = _get_sample(sample_id)
        if not Path(s.depth_path).is_file():
            raise _error(404, "missing_asset", f"depth for {sample_id} not found")
        norm = normalize_percentile(load_gray(s.depth_path))
        return _png_response((norm.data * 255.0).round().astype(np.uint8))

    @app.get("/api/samples/{sample_id}/overlay.png")
    def get_overlay(sample_id: str, alpha: float = DEFAULT_ALPHA):
        s = _get_sample(sample_id)
        if not Path(s.image_path).is_file():
            raise _error(404, "missing_asset", f"image for {sample_id} not found")
        if not s.mask_path or not Path(s.mask_path).is_file():
            raise _error(404, "missing_asset", f"mask for {sample_id} not found")
        if not 0.0 <= alpha <= 1.0:
            raise _error(400, "bad_alpha", "alpha must be in [0, 1]")
        rgb = load_rgb(s.image_path).astype(np.float64)
        mask = load_gray(s.mask_path).data != 0
        out = rgb.copy()
        out[mask] = (1.0 - alpha) * rgb[mask] + alpha * OVERLAY_TINT
        return _png_response(np.clip(np.round(out), 0, 255).astype(np.uint8))

    @app.get("/api/stats")
    def get_stats():
        counts = {name: 0 for name in corpus_mod.STATUSES}
        for s in manifest.samples:
            counts[s.status] += 1
        hist = corpus_mod.coverage_stats(manifest)
        return {"status_counts": counts, "coverage": hist.to_dict()}

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="frontend")

    return app
