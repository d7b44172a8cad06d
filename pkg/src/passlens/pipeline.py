"""Checkpoint-backed inference pipeline shared by the CLI and the HTTP service.

A loaded bundle is immutable; every call rasterizes the scene with the
checkpoint's raster config, standardizes the passer stats with the fitted
standardizer from training, and runs the model. The what-if sweep re-renders
the full scene for every candidate arrival cell rather than patching pixels,
so it exercises exactly the verified render path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import explain as explain_mod
from . import model as model_mod
from .features import PasserStats, build_feature_vector, standardize
from .model import CLASS_NAMES, Checkpoint, load_checkpoint
from .scene import PitchScene, RasterImage, in_target_zone, rasterize_scene

SWEEP_SCHEMA_VERSION = 1
MAX_SWEEP_CELLS_PER_AXIS = 64
DEFAULT_SWEEP_GRID = (24, 16)


def config_hash(payload: dict) -> str:
    """Stable fingerprint of a configuration dict (canonical JSON, sha256)."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ModelBundle:
    checkpoint: Checkpoint
    model: model_mod.TwoStreamClassifier

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelBundle":
        if ckpt.raster_config.width_px != ckpt.model_config.input_px:
            raise ValueError(
                f"checkpoint raster side {ckpt.raster_config.width_px} px does not match "
                f"model input {ckpt.model_config.input_px} px"
            )
        if ckpt.standardizer is None and not ckpt.model_config.image_only:
            raise ValueError("checkpoint lacks a feature standardizer")
        return cls(checkpoint=ckpt, model=model_mod.model_from_checkpoint(ckpt))

    @classmethod
    def from_file(cls, path) -> "ModelBundle":
        return cls.from_checkpoint(load_checkpoint(path))

    @property
    def hash(self) -> str:
        return self.checkpoint.metadata.get("config_hash", "")

    def prepare(self, scene: PitchScene, stats: PasserStats | None):
        """(raster, standardized features) for one request; validates the scene."""
        scene.validate()
        raster = rasterize_scene(scene, self.checkpoint.raster_config)
        if self.checkpoint.model_config.image_only:
            return raster, None
        if stats is None:
            raise ValueError("this model needs passer stats alongside the scene")
        feats = standardize(build_feature_vector(stats), self.checkpoint.standardizer)
        return raster, feats.values


def classify_scene(bundle: ModelBundle, scene: PitchScene, stats: PasserStats | None) -> dict:
    raster, feats = bundle.prepare(scene, stats)
    label, probs = model_mod.predict(bundle.model, raster, feats)
    return {
        "v": 1,
        "label": CLASS_NAMES[label],
        "probabilities": {"success": float(probs[0]), "failure": float(probs[1])},
        "config_hash": bundle.hash,
    }


def explain_scene(
    bundle: ModelBundle,
    scene: PitchScene,
    stats: PasserStats | None,
    class_index: int | None = None,
) -> tuple[explain_mod.ExplanationReport, RasterImage]:
    raster, feats = bundle.prepare(scene, stats)
    report = explain_mod.explain_pass(bundle.model, raster, feats, class_index)
    return report, raster


def sweep_scene(
    bundle: ModelBundle,
    scene: PitchScene,
    stats: PasserStats | None,
    grid: tuple[int, int] = DEFAULT_SWEEP_GRID,
) -> dict:
    """Success probability for every target-zone cell when the arrival point
    moves to the cell centre (everything else fixed). Cells whose centre
    falls outside the zone are omitted."""
    nx, ny = int(grid[0]), int(grid[1])
    if nx < 1 or ny < 1:
        raise ValueError("grid resolution must be at least 1x1")
    if nx > MAX_SWEEP_CELLS_PER_AXIS or ny > MAX_SWEEP_CELLS_PER_AXIS:
        raise SweepTooLargeError(
            f"grid {nx}x{ny} exceeds {MAX_SWEEP_CELLS_PER_AXIS} cells per axis"
        )
    scene.validate()
    length, width = scene.pitch_length_m, scene.pitch_width_m
    zone_r = 30.0
    x_lo, x_hi = max(0.0, length - zone_r), length
    y_lo, y_hi = max(0.0, width / 2.0 - zone_r), min(width, width / 2.0 + zone_r)
    cells = []
    best = None
    for iy in range(ny):
        y = y_lo + (iy + 0.5) * (y_hi - y_lo) / ny
        for ix in range(nx):
            x = x_lo + (ix + 0.5) * (x_hi - x_lo) / nx
            if not in_target_zone((x, y), length, width):
                continue
            moved = replace(scene, ball_to=(x, y))
            result = classify_scene(bundle, moved, stats)
            p = result["probabilities"]["success"]
            cell = {"ix": ix, "iy": iy, "ball_to": [x, y], "p_success": p}
            cells.append(cell)
            if best is None or p > best["p_success"]:  # ties keep the earlier cell
                best = cell
    return {
        "v": SWEEP_SCHEMA_VERSION,
        "grid": [nx, ny],
        "bounds": {"x": [x_lo, x_hi], "y": [y_lo, y_hi]},
        "cells": cells,
        "argmax": best,
        "config_hash": bundle.hash,
    }


class SweepTooLargeError(ValueError):
    pass


def sweep_heat_image(bundle: ModelBundle, scene: PitchScene, sweep: dict) -> np.ndarray:
    """Choropleth for inspection: the scene render with per-cell success
    probability blended on top and the argmax cell outlined."""
    cfg = bundle.checkpoint.raster_config
    base = rasterize_scene(scene, cfg)
    heat = np.zeros((cfg.height_px, cfg.width_px))
    length, width = scene.pitch_length_m, scene.pitch_width_m
    (x_lo, x_hi), (y_lo, y_hi) = sweep["bounds"]["x"], sweep["bounds"]["y"]
    nx, ny = sweep["grid"]

    def cell_rect(ix, iy):
        # pixel block covered by the cell, via the shared position mapping
        from .scene import position_to_pixel

        r0, c0 = position_to_pixel(
            (x_lo + ix * (x_hi - x_lo) / nx, min(y_hi, y_lo + (iy + 1) * (y_hi - y_lo) / ny)),
            scene,
            cfg,
        )
        r1, c1 = position_to_pixel(
            (min(x_hi, x_lo + (ix + 1) * (x_hi - x_lo) / nx), y_lo + iy * (y_hi - y_lo) / ny),
            scene,
            cfg,
        )
        return r0, c0, r1, c1

    for cell in sweep["cells"]:
        r0, c0, r1, c1 = cell_rect(cell["ix"], cell["iy"])
        heat[r0 : r1 + 1, c0 : c1 + 1] = cell["p_success"]
    out = explain_mod.overlay_heatmap(base.pixels, heat)
    if sweep["argmax"] is not None:
        r0, c0, r1, c1 = cell_rect(sweep["argmax"]["ix"], sweep["argmax"]["iy"])
        out[r0, c0 : c1 + 1] = (0, 0, 0)
        out[r1, c0 : c1 + 1] = (0, 0, 0)
        out[r0 : r1 + 1, c0] = (0, 0, 0)
        out[r0 : r1 + 1, c1] = (0, 0, 0)
    return out
