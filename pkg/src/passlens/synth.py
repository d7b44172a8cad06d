"""Synthetic pass scenarios with a known logistic ground truth.

Every generated pass carries its exact success probability, so the Bayes
optimal accuracy of any dataset is computable in closed form and bounds what
a trained model can reach. The ground truth mixes spatial factors (how clear
the passing lane is, how well the intended receiver's run lines up with the
ball, pass distance) with the passer's latent skill; the same latent skill
drives the seasonal stats vector, making stats an informative but noisy
proxy.

Two degenerate modes isolate one modality each: "spatial_only" zeroes the
skill weight, "stats_only" zeroes all spatial weights.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .features import (
    CATEGORIES,
    PasserStats,
    build_feature_vector,
    passer_stats_from_dict,
    passer_stats_to_dict,
)
from .model import SUCCESS, FAILURE
from .scene import (
    MAX_SPEED_MPS,
    OFFENSE,
    DEFENSE,
    PitchScene,
    PlayerState,
    RasterConfig,
    RasterImage,
    TARGET_ZONE_RADIUS_M,
    desk_raster_config,
    in_target_zone,
    raster_config_from_dict,
    raster_config_to_dict,
    rasterize_scene,
    scene_from_dict,
    scene_to_dict,
    write_png,
)

DATASET_SCHEMA_VERSION = 1

LANE_CLEARANCE_CAP_M = 15.0


def point_to_segment_distance(p, a, b) -> float:
    """Euclidean distance from point p to the segment a->b."""
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg_sq
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def lane_clearance(scene: PitchScene) -> float:
    """Min distance from any defender to the pass segment, capped at 15 m.

    No defenders means a fully clear lane (the cap).
    """
    dists = [
        point_to_segment_distance(p.pos, scene.ball_from, scene.ball_to)
        for p in scene.players
        if p.team == DEFENSE
    ]
    if not dists:
        return LANE_CLEARANCE_CAP_M
    return min(LANE_CLEARANCE_CAP_M, min(dists))


def receiver_alignment(scene: PitchScene) -> float:
    """Cosine between the intended receiver's velocity and the direction from
    the receiver to the arrival point.

    The receiver is the offense player nearest the arrival point, passer
    excluded. Degenerate cases (no teammate, zero velocity, receiver standing
    on the arrival point) contribute 0.
    """
    candidates = [
        (i, p) for i, p in enumerate(scene.players)
        if p.team == OFFENSE and i != scene.passer_index
    ]
    if not candidates:
        return 0.0
    bx, by = scene.ball_to
    _, receiver = min(
        candidates, key=lambda ip: (ip[1].pos[0] - bx) ** 2 + (ip[1].pos[1] - by) ** 2
    )
    tx, ty = bx - receiver.pos[0], by - receiver.pos[1]
    t_norm = math.hypot(tx, ty)
    v_norm = receiver.speed()
    if t_norm == 0.0 or v_norm == 0.0:
        return 0.0
    return (receiver.vel[0] * tx + receiver.vel[1] * ty) / (t_norm * v_norm)


def pass_distance(scene: PitchScene) -> float:
    return math.hypot(
        scene.ball_to[0] - scene.ball_from[0], scene.ball_to[1] - scene.ball_from[1]
    )


@dataclass(frozen=True)
class GroundTruth:
    """Logistic success model: P = sigmoid(w . phi + bias) with
    phi = (lane clearance, receiver alignment, latent skill, pass distance).

    Default weights were tuned once against the generator itself (see
    scripts/calibrate_ground_truth.py) so that the default mode lands near
    0.80 Bayes accuracy with a roughly 0.58 success rate, and both modalities
    carry signal.
    """

    w_clearance: float = 0.40
    w_alignment: float = 0.90
    w_skill: float = 1.30
    w_distance: float = -0.06
    bias: float = 0.0

    def features(self, scene: PitchScene, skill: float) -> np.ndarray:
        return np.array(
            [lane_clearance(scene), receiver_alignment(scene), skill, pass_distance(scene)],
            dtype=np.float64,
        )

    def probability(self, scene: PitchScene, skill: float) -> float:
        phi = self.features(scene, skill)
        w = np.array([self.w_clearance, self.w_alignment, self.w_skill, self.w_distance])
        z = float(w @ phi) + self.bias
        return 1.0 / (1.0 + math.exp(-z))


def oracle_probability(scene: PitchScene, skill: float, gt: GroundTruth) -> float:
    """Closed-form success probability; the Bayes label is success iff p >= 0.5."""
    return gt.probability(scene, skill)


# --- passer archetypes ----------------------------------------------------------

_COUNT_MEANS = {
    # per category: all, opposition area, long, through, cross
    "defender": (900.0, 160.0, 130.0, 8.0, 10.0),
    "midfielder": (850.0, 330.0, 60.0, 45.0, 35.0),
    "forward": (450.0, 260.0, 25.0, 18.0, 30.0),
}
_BASE_RATES = (0.80, 0.70, 0.55, 0.35, 0.30)

ROLES = tuple(_COUNT_MEANS)


@dataclass(frozen=True)
class PasserArchetype:
    """Role-conditioned stats generator. Midfielders pile up through passes,
    defenders long passes; the latent skill shifts every success rate up or
    down through a logit bump, so all rates move monotonically with skill."""

    role: str
    count_means: tuple[float, ...]
    base_rates: tuple[float, ...] = _BASE_RATES
    skill_gain: float = 0.8
    rate_noise: float = 0.15
    count_spread: float = 0.25

    def sample_stats(self, skill: float, rng: np.random.Generator) -> PasserStats:
        values = {}
        for cat, mean, base in zip(CATEGORIES, self.count_means, self.base_rates):
            count = int(rng.poisson(mean * rng.lognormal(0.0, self.count_spread)))
            logit = math.log(base / (1.0 - base))
            bump = self.skill_gain * skill + rng.normal(0.0, self.rate_noise)
            rate = 1.0 / (1.0 + math.exp(-(logit + bump)))
            if count == 0:
                rate = 0.0
            values[f"total_{cat}"] = count
            values[f"rate_{cat}"] = rate
        return PasserStats(**values)


def archetype(role: str) -> PasserArchetype:
    if role not in _COUNT_MEANS:
        raise ValueError(f"unknown role {role!r}; choose from {ROLES}")
    return PasserArchetype(role=role, count_means=_COUNT_MEANS[role])


def archetype_reference_stats(role: str, skill: float = 0.0) -> PasserStats:
    """Deterministic representative stats for a role: mean counts, noise-free
    rates at the given skill. Used by UIs that pick an archetype instead of
    entering raw stats."""
    arch = archetype(role)
    values = {}
    for cat, mean, base in zip(CATEGORIES, arch.count_means, arch.base_rates):
        count = int(round(mean))
        logit = math.log(base / (1.0 - base))
        rate = 1.0 / (1.0 + math.exp(-(logit + arch.skill_gain * skill)))
        values[f"total_{cat}"] = count
        values[f"rate_{cat}"] = rate if count > 0 else 0.0
    return PasserStats(**values)


# --- scenario sampling ----------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    ground_truth: GroundTruth = field(default_factory=GroundTruth)
    raster: RasterConfig = field(default_factory=desk_raster_config)
    pitch_length_m: float = 105.0
    pitch_width_m: float = 68.0
    n_offense: tuple[int, int] = (2, 11)  # inclusive bounds per side
    n_defense: tuple[int, int] = (1, 11)
    velocity_sigma_mps: float = 2.0
    mode: str = "default"


def default_generator_config(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**overrides)


def spatial_only_generator_config(**overrides) -> GeneratorConfig:
    """Labels depend only on geometry; passer skill carries no signal."""
    gt = GroundTruth(w_skill=0.0, bias=-1.10)
    return GeneratorConfig(ground_truth=gt, mode="spatial_only", **overrides)


def stats_only_generator_config(**overrides) -> GeneratorConfig:
    """Labels depend only on latent skill; the image carries no signal.

    bias 0 keeps the classes balanced (skill is symmetric around 0)."""
    gt = GroundTruth(w_clearance=0.0, w_alignment=0.0, w_distance=0.0, bias=0.0)
    return GeneratorConfig(ground_truth=gt, mode="stats_only", **overrides)


GENERATOR_MODES = {
    "default": default_generator_config,
    "spatial_only": spatial_only_generator_config,
    "stats_only": stats_only_generator_config,
}


@dataclass
class Scenario:
    scene: PitchScene
    stats: PasserStats
    skill: float
    role: str


def _sample_velocity(rng: np.random.Generator, sigma: float) -> tuple[float, float]:
    vx, vy = rng.normal(0.0, sigma, size=2)
    speed = math.hypot(vx, vy)
    if speed > MAX_SPEED_MPS:
        vx, vy = vx * MAX_SPEED_MPS / speed, vy * MAX_SPEED_MPS / speed
    return float(vx), float(vy)


def _sample_in_target_zone(rng: np.random.Generator, length: float, width: float):
    x_lo = max(0.0, length - TARGET_ZONE_RADIUS_M)
    while True:
        x = rng.uniform(x_lo, length)
        y = rng.uniform(0.0, width)
        if in_target_zone((x, y), length, width):
            return float(x), float(y)


def sample_scenario(config: GeneratorConfig, rng: np.random.Generator) -> Scenario:
    """One labeled-pass setup: arrival point uniform inside the target zone,
    role-biased player placement, Gaussian velocities clipped to 13 m/s,
    passer drawn from offense with the ball departing at their feet."""
    length, width = config.pitch_length_m, config.pitch_width_m
    ball_to = _sample_in_target_zone(rng, length, width)

    n_off = int(rng.integers(config.n_offense[0], config.n_offense[1] + 1))
    n_def = int(rng.integers(config.n_defense[0], config.n_defense[1] + 1))
    players: list[PlayerState] = []
    # offense spreads over the attacking 60 m, defense packs the defended 45 m
    for _ in range(n_off):
        x = rng.uniform(max(0.0, length - 60.0), length)
        y = rng.uniform(0.0, width)
        players.append(
            PlayerState(OFFENSE, (float(x), float(y)), _sample_velocity(rng, config.velocity_sigma_mps))
        )
    for _ in range(n_def):
        x = rng.uniform(max(0.0, length - 45.0), length)
        y = rng.uniform(0.0, width)
        players.append(
            PlayerState(DEFENSE, (float(x), float(y)), _sample_velocity(rng, config.velocity_sigma_mps))
        )

    offense_indices = [i for i, p in enumerate(players) if p.team == OFFENSE]
    passer_index = int(rng.choice(offense_indices))
    ball_from = players[passer_index].pos

    role = ROLES[int(rng.integers(0, len(ROLES)))]
    skill = float(rng.normal(0.0, 1.0))
    stats = archetype(role).sample_stats(skill, rng)

    scene = PitchScene(
        players=players,
        ball_from=ball_from,
        ball_to=ball_to,
        passer_index=passer_index,
        pitch_length_m=length,
        pitch_width_m=width,
    )
    scene.validate()
    return Scenario(scene=scene, stats=stats, skill=skill, role=role)


# --- dataset ---------------------------------------------------------------------


@dataclass
class SynthDataset:
    config: GeneratorConfig
    seed: int
    scenes: list[PitchScene]
    stats: list[PasserStats]
    skills: np.ndarray  # (n,)
    roles: list[str]
    features_raw: np.ndarray  # (n, 15)
    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,) class indices, 0 = success
    oracle_p: np.ndarray  # (n,) exact success probabilities

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def raster_config(self) -> RasterConfig:
        return self.config.raster

    def success_rate(self) -> float:
        return float(np.mean(self.labels == SUCCESS))


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scenario stream derived from (seed, index); generation order and
    parallelism cannot change the output."""
    return np.random.default_rng([seed, index])


def generate_dataset(config: GeneratorConfig, n: int, seed: int) -> SynthDataset:
    """n labeled scenarios; labels are Bernoulli draws of the oracle
    probability, which is stored alongside for Bayes-accuracy math."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    scenes, stats_list, roles = [], [], []
    skills = np.empty(n)
    labels = np.empty(n, dtype=np.int64)
    oracle_p = np.empty(n)
    features = np.empty((n, 15))
    h = config.raster.height_px
    w = config.raster.width_px
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    for i in range(n):
        rng = scenario_rng(seed, i)
        sc = sample_scenario(config, rng)
        p = oracle_probability(sc.scene, sc.skill, config.ground_truth)
        labels[i] = SUCCESS if rng.random() < p else FAILURE
        oracle_p[i] = p
        skills[i] = sc.skill
        scenes.append(sc.scene)
        stats_list.append(sc.stats)
        roles.append(sc.role)
        features[i] = build_feature_vector(sc.stats).values
        images[i] = rasterize_scene(sc.scene, config.raster).pixels
    return SynthDataset(
        config=config,
        seed=seed,
        scenes=scenes,
        stats=stats_list,
        skills=skills,
        roles=roles,
        features_raw=features,
        images=images,
        labels=labels,
        oracle_p=oracle_p,
    )


def bayes_accuracy(oracle_p: np.ndarray) -> float:
    """Accuracy of the optimal classifier on this set: mean of max(p, 1-p)."""
    p = np.asarray(oracle_p, dtype=np.float64)
    return float(np.mean(np.maximum(p, 1.0 - p)))


def bayes_labels(oracle_p: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(oracle_p) >= 0.5, SUCCESS, FAILURE)


# --- persistence -----------------------------------------------------------------


def generator_config_to_dict(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d["raster"] = raster_config_to_dict(config.raster)
    d["n_offense"] = list(config.n_offense)
    d["n_defense"] = list(config.n_defense)
    return d


def generator_config_from_dict(d: dict) -> GeneratorConfig:
    d = dict(d)
    d["ground_truth"] = GroundTruth(**d["ground_truth"])
    d["raster"] = raster_config_from_dict(d["raster"])
    d["n_offense"] = tuple(d["n_offense"])
    d["n_defense"] = tuple(d["n_defense"])
    return GeneratorConfig(**d)


def save_dataset(ds: SynthDataset, out_dir, render_png: bool = False) -> None:
    """Directory layout (versioned, byte-stable given identical inputs):

    meta.json      schema version, seed, size, full generator config
    scenes.jsonl   one record per pass: scene, passer stats, skill, role
    labels.csv     index,label,oracle_p   (label 0 = success, 1 = failure)
    renders/       optional PNG renders for inspection
    """
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "v": DATASET_SCHEMA_VERSION,
        "seed": ds.seed,
        "n": len(ds),
        "generator_config": generator_config_to_dict(ds.config),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "scenes.jsonl"), "w") as fh:
        for scene, stats, skill, role in zip(ds.scenes, ds.stats, ds.skills, ds.roles):
            record = {
                "scene": scene_to_dict(scene),
                "passer_stats": passer_stats_to_dict(stats),
                "skill": float(skill),
                "role": role,
            }
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label", "oracle_p"])
        for i, (label, p) in enumerate(zip(ds.labels, ds.oracle_p)):
            writer.writerow([i, int(label), repr(float(p))])
    if render_png:
        render_dir = os.path.join(out_dir, "renders")
        os.makedirs(render_dir, exist_ok=True)
        for i, pixels in enumerate(ds.images):
            write_png(RasterImage(pixels), os.path.join(render_dir, f"{i:05d}.png"))


def load_dataset(in_dir) -> SynthDataset:
    """Rebuild a dataset directory; images are re-rasterized from the scenes
    (rendering is deterministic, so nothing is lost by not storing them)."""
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    if meta["v"] != DATASET_SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset version {meta['v']}")
    config = generator_config_from_dict(meta["generator_config"])
    scenes, stats_list, skills, roles = [], [], [], []
    with open(os.path.join(in_dir, "scenes.jsonl")) as fh:
        for line in fh:
            record = json.loads(line)
            scenes.append(scene_from_dict(record["scene"]))
            stats_list.append(passer_stats_from_dict(record["passer_stats"]))
            skills.append(float(record["skill"]))
            roles.append(record["role"])
    n = len(scenes)
    labels = np.empty(n, dtype=np.int64)
    oracle_p = np.empty(n)
    with open(os.path.join(in_dir, "labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["index"])
            labels[i] = int(row["label"])
            oracle_p[i] = float(row["oracle_p"])
    features = np.stack([build_feature_vector(s).values for s in stats_list])
    images = np.stack([rasterize_scene(s, config.raster).pixels for s in scenes])
    return SynthDataset(
        config=config,
        seed=meta["seed"],
        scenes=scenes,
        stats=stats_list,
        skills=np.asarray(skills),
        roles=roles,
        features_raw=features,
        images=images,
        labels=labels,
        oracle_p=oracle_p,
    )
