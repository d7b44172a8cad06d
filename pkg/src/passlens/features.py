"""Passer seasonal-stats feature vector and its standardization.

Five pass categories (all, opposition area, long >30 m, through, cross) each
contribute a season total, a success rate, and their product, giving a
15-dimensional vector in a fixed order. Products are formed on raw values;
all 15 coordinates are then z-scored with mean/std fitted on the training
split only.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

CATEGORIES = ("all", "opposition", "long", "through", "cross")

FEATURE_NAMES = tuple(
    name
    for cat in CATEGORIES
    for name in (f"total_{cat}", f"rate_{cat}", f"total_x_rate_{cat}")
)

N_FEATURES = len(FEATURE_NAMES)  # 15


@dataclass(frozen=True)
class PasserStats:
    """Per-category season pass counts and success rates for one passer.

    Convention: a category with zero attempts has success rate 0 (the rate is
    undefined there; zero is the conservative fill and keeps products finite).
    """

    total_all: int
    rate_all: float
    total_opposition: int
    rate_opposition: float
    total_long: int
    rate_long: float
    total_through: int
    rate_through: float
    total_cross: int
    rate_cross: float

    def pairs(self) -> list[tuple[int, float]]:
        return [(getattr(self, f"total_{c}"), getattr(self, f"rate_{c}")) for c in CATEGORIES]

    def validate(self) -> None:
        for cat, (total, rate) in zip(CATEGORIES, self.pairs()):
            if total < 0 or total != int(total):
                raise ValueError(f"total_{cat} must be a nonnegative integer, got {total!r}")
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate_{cat} must lie in [0, 1], got {rate!r}")
            if total == 0 and rate != 0.0:
                raise ValueError(f"rate_{cat} must be 0 when total_{cat} is 0")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray  # (15,) float64
    standardized: bool = False

    def __post_init__(self):
        if self.values.shape != (N_FEATURES,):
            raise ValueError(f"feature vector must have shape ({N_FEATURES},)")


def build_feature_vector(stats: PasserStats) -> FeatureVector:
    """Raw 15-vector: (total, rate, total*rate) per category, fixed order."""
    stats.validate()
    v = np.empty(N_FEATURES, dtype=np.float64)
    for k, (total, rate) in enumerate(stats.pairs()):
        v[3 * k] = float(total)
        v[3 * k + 1] = float(rate)
        v[3 * k + 2] = float(total) * float(rate)
    return FeatureVector(v, standardized=False)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray  # (15,)
    std: np.ndarray  # (15,) population convention, >= 0
    fitted_on: str  # sha256 fingerprint of the fit matrix

    def __post_init__(self):
        if self.mean.shape != (N_FEATURES,) or self.std.shape != (N_FEATURES,):
            raise ValueError("standardizer mean/std must have 15 entries")
        if np.any(self.std < 0):
            raise ValueError("standardizer std entries must be nonnegative")


def fit_standardizer(vectors: list[FeatureVector] | np.ndarray) -> Standardizer:
    """Per-feature population mean/std over the training-split passer set."""
    if isinstance(vectors, np.ndarray):
        mat = np.asarray(vectors, dtype=np.float64)
    else:
        mat = np.stack([fv.values for fv in vectors]).astype(np.float64)
    if mat.ndim != 2 or mat.shape[1] != N_FEATURES:
        raise ValueError(f"fit matrix must be (n, {N_FEATURES})")
    if mat.shape[0] < 2:
        raise ValueError("fitting a standardizer needs at least 2 vectors")
    fingerprint = hashlib.sha256(np.ascontiguousarray(mat).tobytes()).hexdigest()
    return Standardizer(
        mean=mat.mean(axis=0),
        std=mat.std(axis=0),  # population std
        fitted_on=fingerprint,
    )


def standardize(vec: FeatureVector, standardizer: Standardizer) -> FeatureVector:
    """z-score each coordinate; zero-std coordinates map to 0 (keeps gradients finite)."""
    out = standardize_matrix(vec.values[None, :], standardizer)[0]
    return FeatureVector(out, standardized=True)


def standardize_matrix(mat: np.ndarray, standardizer: Standardizer) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    safe = np.where(standardizer.std > 0, standardizer.std, 1.0)
    out = (mat - standardizer.mean) / safe
    return np.where(standardizer.std > 0, out, 0.0)


# --- ingestion ---------------------------------------------------------------

_STATS_FIELDS = tuple(
    name for cat in CATEGORIES for name in (f"total_{cat}", f"rate_{cat}")
)


def passer_stats_from_dict(d: dict) -> PasserStats:
    try:
        kwargs = {}
        for name in _STATS_FIELDS:
            raw = d[name]
            kwargs[name] = int(raw) if name.startswith("total_") else float(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed passer stats object: {exc!r}") from exc
    stats = PasserStats(**kwargs)
    stats.validate()
    return stats


def passer_stats_to_dict(stats: PasserStats) -> dict:
    return {name: getattr(stats, name) for name in _STATS_FIELDS}


def passer_stats_from_json(text: str) -> PasserStats:
    return passer_stats_from_dict(json.loads(text))


def read_passer_stats_csv(path) -> list[PasserStats]:
    """CSV with one row per passer; columns are the ten total_*/rate_* fields."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(passer_stats_from_dict(row))
    return out


def standardizer_to_dict(s: Standardizer) -> dict:
    return {"mean": s.mean.tolist(), "std": s.std.tolist(), "fitted_on": s.fitted_on}


def standardizer_from_dict(d: dict) -> Standardizer:
    return Standardizer(
        mean=np.asarray(d["mean"], dtype=np.float64),
        std=np.asarray(d["std"], dtype=np.float64),
        fitted_on=str(d["fitted_on"]),
    )
