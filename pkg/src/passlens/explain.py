"""Two-stage explanation of a classified pass.

Stage one compares modalities: the tracking-image contribution is the plain
signed sum of the target logit's gradients over every pixel and channel, the
stats contribution the signed sum over the 15 feature gradients. Raw values
are only comparable across passes after min-max standardization over the
explained set, never across modalities.

Stage two looks inside each modality: a gradient-weighted class activation
map over the last conv feature map for the image, and the per-feature signed
gradients for the stats vector.
"""

from __future__ import annotations

import base64
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .features import FEATURE_NAMES
from .model import CLASS_NAMES, InputGrads, TwoStreamClassifier

REPORT_SCHEMA_VERSION = 1


def modality_contributions(
    pixel_grads: np.ndarray, feature_grads: np.ndarray
) -> tuple[float, float]:
    """Signed sums of the logit gradients over all pixels / all features.

    No absolute values or squaring: the sign carries direction of influence.
    Use ``magnitude_contributions`` for a diagnostics-only magnitude view.
    """
    return float(np.sum(pixel_grads)), float(np.sum(feature_grads))


def magnitude_contributions(
    pixel_grads: np.ndarray, feature_grads: np.ndarray
) -> tuple[float, float]:
    """Sum-of-absolute-values variant; a diagnostic, never the default."""
    return float(np.sum(np.abs(pixel_grads))), float(np.sum(np.abs(feature_grads)))


def minmax_standardize(values) -> np.ndarray:
    """(x - min) / (max - min) over a population of at least two values.

    An all-equal population is degenerate; it maps to all 0.5 with a warning
    rather than dividing by zero.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("min-max standardization needs at least 2 values")
    lo, hi = arr.min(), arr.max()
    if lo == hi:
        warnings.warn("all values equal; min-max standardization collapses to 0.5")
        return np.full_like(arr, 0.5)
    return (arr - lo) / (hi - lo)


def gradcam(feature_map: np.ndarray, featuremap_grads: np.ndarray) -> np.ndarray:
    """Class activation map over a (u, v, K) feature map.

    Per-channel weights are the spatial averages of the logit gradients;
    the map is the ReLU of the weight-summed channels, so it is nonnegative
    everywhere.
    """
    if feature_map.shape != featuremap_grads.shape or feature_map.ndim != 3:
        raise ValueError(
            f"feature map {feature_map.shape} and grads {featuremap_grads.shape} "
            "must both be (u, v, K)"
        )
    alpha = featuremap_grads.mean(axis=(0, 1))  # (K,), 1/Z sum over the u*v cells
    heat = np.tensordot(feature_map, alpha, axes=([2], [0]))
    return np.maximum(heat, 0.0)


def upsample_heatmap(heat: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear (corner-aligned) upsample to the image size, then max-normalize
    into [0, 1]. An all-zero map stays all-zero."""
    if np.any(heat < 0):
        raise ValueError("heatmap must be nonnegative")
    src_h, src_w = heat.shape
    out_h, out_w = target_hw
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")

    def axis_coords(n_out, n_src):
        if n_out == 1 or n_src == 1:
            return np.zeros(n_out, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_src - 1) / (n_out - 1)

    ys = axis_coords(out_h, src_h)
    xs = axis_coords(out_w, src_w)
    y0 = np.minimum(np.floor(ys).astype(int), src_h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = (
        heat[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + heat[np.ix_(y0, x1)] * (1 - wy) * wx
        + heat[np.ix_(y1, x0)] * wy * (1 - wx)
        + heat[np.ix_(y1, x1)] * wy * wx
    )
    peak = out.max()
    if peak > 0:
        out = out / peak
    return out


def feature_attribution(feature_grads: np.ndarray) -> list[tuple[int, float]]:
    """Per-feature signed contributions ranked by magnitude, largest first."""
    grads = np.asarray(feature_grads, dtype=np.float64)
    order = np.argsort(-np.abs(grads), kind="stable")
    return [(int(i), float(grads[i])) for i in order]


def mean_feature_attribution(per_pass_grads) -> np.ndarray:
    """Dataset-level aggregation: the per-feature mean over all passes."""
    mat = np.asarray(list(per_pass_grads), dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a collection of per-pass gradient vectors")
    return mat.mean(axis=0)


@dataclass
class ExplanationReport:
    """Everything the two explanation stages produce for one (pass, class)."""

    target_class: int
    predicted_class: int
    probabilities: np.ndarray  # (2,)
    C_T_raw: float
    C_S_raw: float
    feature_grads: np.ndarray  # (15,) signed
    gradcam: np.ndarray  # (u, v) nonnegative
    gradcam_upsampled: np.ndarray  # (H, W) in [0, 1]
    C_T_std: float | None = None  # populated only in batch context
    C_S_std: float | None = None


def explain_pass(
    model: TwoStreamClassifier, image, features, class_index: int | None = None
) -> ExplanationReport:
    """Run both explanation stages for one example.

    ``class_index`` defaults to the predicted class. Standardized contribution
    fields stay None here; use ``explain_collection`` to populate them over an
    explained dataset.
    """
    if class_index is None:
        class_index, _ = model_mod.predict(model, image, features)
    grads = model_mod.input_grads(model, image, features, class_index)
    return report_from_grads(grads, model.config.input_px)


def report_from_grads(grads: InputGrads, image_px: int) -> ExplanationReport:
    c_t, c_s = modality_contributions(grads.pixel_grads, grads.feature_grads)
    heat = gradcam(grads.trace.feature_map, grads.featuremap_grads)
    p = grads.trace.probabilities
    predicted = model_mod.SUCCESS if p[model_mod.SUCCESS] > p[model_mod.FAILURE] else model_mod.FAILURE
    return ExplanationReport(
        target_class=grads.class_index,
        predicted_class=predicted,
        probabilities=p,
        C_T_raw=c_t,
        C_S_raw=c_s,
        feature_grads=grads.feature_grads,
        gradcam=heat,
        gradcam_upsampled=upsample_heatmap(heat, (image_px, image_px)),
    )


def explain_collection(
    model: TwoStreamClassifier, images: np.ndarray, features: np.ndarray | None
) -> list[ExplanationReport]:
    """Explain every example and fill the min-max standardized contribution
    fields over this population (each modality standardized independently)."""
    reports = []
    for i in range(images.shape[0]):
        feats = None if features is None else features[i]
        reports.append(explain_pass(model, images[i], feats))
    if len(reports) >= 2:
        ct = minmax_standardize([r.C_T_raw for r in reports])
        cs = minmax_standardize([r.C_S_raw for r in reports])
        for r, t, s in zip(reports, ct, cs):
            r.C_T_std = float(t)
            r.C_S_std = float(s)
    return reports


# --- serialization and overlays ------------------------------------------------


def report_to_dict(report: ExplanationReport, heatmap_encoding: str = "array") -> dict:
    """JSON-ready dict. ``heatmap_encoding`` is "array" (nested lists) or
    "base64" (raw little-endian float64 bytes, row-major)."""
    if heatmap_encoding == "array":
        up = report.gradcam_upsampled.tolist()
    elif heatmap_encoding == "base64":
        up = base64.b64encode(
            np.ascontiguousarray(report.gradcam_upsampled, dtype="<f8").tobytes()
        ).decode("ascii")
    else:
        raise ValueError("heatmap_encoding must be 'array' or 'base64'")
    return {
        "v": REPORT_SCHEMA_VERSION,
        "target_class": report.target_class,
        "target_class_name": CLASS_NAMES[report.target_class],
        "predicted_class": report.predicted_class,
        "predicted_class_name": CLASS_NAMES[report.predicted_class],
        "probabilities": {
            "success": float(report.probabilities[0]),
            "failure": float(report.probabilities[1]),
        },
        "C_T_raw": report.C_T_raw,
        "C_S_raw": report.C_S_raw,
        "C_T_std": report.C_T_std,
        "C_S_std": report.C_S_std,
        "feature_grads": [
            {"index": i, "name": name, "value": float(g)}
            for i, (name, g) in enumerate(zip(FEATURE_NAMES, report.feature_grads))
        ],
        "gradcam": report.gradcam.tolist(),
        "gradcam_upsampled": up,
        "heatmap_encoding": heatmap_encoding,
    }


_HEAT_STOPS = np.array(
    [[0, 0, 96], [0, 128, 255], [0, 255, 128], [255, 255, 0], [255, 0, 0]],
    dtype=np.float64,
)


def heat_to_rgb(heat01: np.ndarray) -> np.ndarray:
    """Map a [0, 1] heat value to an RGB ramp (cold blue to hot red)."""
    h = np.clip(np.asarray(heat01, dtype=np.float64), 0.0, 1.0)
    pos = h * (len(_HEAT_STOPS) - 1)
    idx = np.minimum(pos.astype(int), len(_HEAT_STOPS) - 2)
    frac = (pos - idx)[..., None]
    return ((1 - frac) * _HEAT_STOPS[idx] + frac * _HEAT_STOPS[idx + 1]).astype(np.uint8)


def overlay_heatmap(pixels: np.ndarray, heat01: np.ndarray) -> np.ndarray:
    """Alpha-blend the heat ramp onto an RGB uint8 image at fixed 0.5 opacity."""
    if pixels.shape[:2] != heat01.shape:
        raise ValueError("heatmap and image sizes differ")
    blend = 0.5 * pixels.astype(np.float64) + 0.5 * heat_to_rgb(heat01).astype(np.float64)
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)
