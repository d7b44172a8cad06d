"""Read-only inference/explanation HTTP API for the what-if UI.

Stateless per request over an immutable loaded checkpoint: concurrent
requests see exactly the answers sequential execution would give. A new
checkpoint can be hot-swapped between requests with ``swap_bundle``.

Endpoints (JSON, schema-versioned with a "v" field):

    GET  /healthz      liveness, always 200
    GET  /model/info   checkpoint config hash, presets, archetype ids
    POST /classify     {scene, stats|archetype}            -> label + probabilities
    POST /explain      {scene, stats|archetype, class?}    -> explanation report
    POST /sweep        {scene, stats|archetype, grid?}     -> per-cell success map

Errors: 400 malformed scene/stats, 409 request raster config differs from the
checkpoint's, 413 sweep grid too large, 503 no model loaded.
"""

from __future__ import annotations

import hashlib
import json

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware

from . import explain as explain_mod
from . import pipeline
from .features import PasserStats, passer_stats_from_dict
from .model import CLASS_NAMES, model_config_to_dict
from .scene import PitchScene, SceneError, raster_config_to_dict, scene_from_dict
from .synth import ROLES, archetype_reference_stats

API_VERSION = 1
_SWEEP_CACHE_MAX = 128


def _parse_payload(body: dict, bundle: pipeline.ModelBundle) -> tuple[PitchScene, PasserStats | None]:
    if not isinstance(body, dict) or "scene" not in body:
        raise HTTPException(status_code=400, detail="request body must contain a 'scene' object")
    if body.get("raster") is not None:
        if dict(body["raster"]) != raster_config_to_dict(bundle.checkpoint.raster_config):
            raise HTTPException(
                status_code=409,
                detail="request raster config does not match the loaded checkpoint",
            )
    try:
        scene = scene_from_dict(body["scene"])
    except SceneError as exc:
        raise HTTPException(status_code=400, detail=f"scene: {exc}") from exc
    stats = None
    try:
        if body.get("stats") is not None:
            stats = passer_stats_from_dict(body["stats"])
        elif body.get("archetype") is not None:
            role = str(body["archetype"])
            if role not in ROLES:
                raise ValueError(f"unknown archetype {role!r}; choose from {sorted(ROLES)}")
            stats = archetype_reference_stats(role)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=f"stats: {exc}") from exc
    return scene, stats


def create_app(bundle: pipeline.ModelBundle | None = None) -> FastAPI:
    app = FastAPI(title="passlens service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],  # local single-user UI
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )
    app.state.bundle = bundle
    app.state.sweep_cache = {}

    def current_bundle() -> pipeline.ModelBundle:
        b = app.state.bundle
        if b is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        return b

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/model/info")
    def model_info():
        b = current_bundle()
        meta = b.checkpoint.metadata
        return {
            "v": API_VERSION,
            "config_hash": b.hash,
            "model_config": model_config_to_dict(b.checkpoint.model_config),
            "raster_config": raster_config_to_dict(b.checkpoint.raster_config),
            "classes": list(CLASS_NAMES),
            "archetypes": sorted(ROLES),
            "fold": meta.get("fold"),
            "best_val_accuracy": meta.get("best_val_accuracy"),
        }

    @app.post("/classify")
    async def classify(request: Request):
        b = current_bundle()
        scene, stats = _parse_payload(await _json_body(request), b)
        try:
            return pipeline.classify_scene(b, scene, stats)
        except (SceneError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/explain")
    async def explain(request: Request):
        b = current_bundle()
        body = await _json_body(request)
        scene, stats = _parse_payload(body, b)
        class_index = None
        if body.get("class") is not None:
            name = str(body["class"])
            if name not in CLASS_NAMES:
                raise HTTPException(
                    status_code=400, detail=f"class must be one of {list(CLASS_NAMES)}"
                )
            class_index = CLASS_NAMES.index(name)
        try:
            report, _ = pipeline.explain_scene(b, scene, stats, class_index)
        except (SceneError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        payload = explain_mod.report_to_dict(report)
        payload["config_hash"] = b.hash
        return payload

    @app.post("/sweep")
    async def sweep(request: Request):
        b = current_bundle()
        body = await _json_body(request)
        request_hash = hashlib.sha256(
            json.dumps(body, sort_keys=True).encode() + b.hash.encode()
        ).hexdigest()
        cached = app.state.sweep_cache.get(request_hash)
        if cached is not None:
            return cached
        scene, stats = _parse_payload(body, b)
        grid = body.get("grid") or list(pipeline.DEFAULT_SWEEP_GRID)
        try:
            result = pipeline.sweep_scene(b, scene, stats, (int(grid[0]), int(grid[1])))
        except pipeline.SweepTooLargeError as exc:
            raise HTTPException(status_code=413, detail=str(exc)) from exc
        except (SceneError, ValueError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        result["request_hash"] = request_hash
        if len(app.state.sweep_cache) >= _SWEEP_CACHE_MAX:
            app.state.sweep_cache.pop(next(iter(app.state.sweep_cache)))
        app.state.sweep_cache[request_hash] = result
        return result

    return app


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception as exc:  # malformed JSON
        raise HTTPException(status_code=400, detail="request body is not valid JSON") from exc
    if not isinstance(body, dict):
        raise HTTPException(status_code=400, detail="request body must be a JSON object")
    return body


def swap_bundle(app: FastAPI, bundle: pipeline.ModelBundle | None) -> None:
    """Atomic checkpoint replacement between requests."""
    app.state.sweep_cache = {}
    app.state.bundle = bundle
