"""Pass-event scenes and their deterministic image encoding.

A scene is a snapshot of one pass: player positions/velocities in metres
(pitch frame, origin at a corner, attack toward positive x), plus the ball
departure and arrival points. Scenes render onto a white square image in a
fixed draw order so that the same scene always produces the same bytes on
every platform:

    1. dashed pass line (departure -> arrival)
    2. per-player velocity segments
    3. filled player disks
    4. departure/arrival ball disks

Open space stays exactly white [255, 255, 255]. Both pitch axes map
independently onto [-1, 1], so the square image stretches the pitch
anisotropically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

OFFENSE = "offense"
DEFENSE = "defense"
TEAMS = (OFFENSE, DEFENSE)

MAX_SPEED_MPS = 13.0
TARGET_ZONE_RADIUS_M = 30.0

WHITE = (255, 255, 255)

SCENE_SCHEMA_VERSION = 1


class SceneError(ValueError):
    """Raised when a scene or its inputs violate the pitch-frame contract."""


@dataclass(frozen=True)
class PlayerState:
    team: str
    pos: tuple[float, float]
    vel: tuple[float, float]

    def speed(self) -> float:
        return math.hypot(self.vel[0], self.vel[1])


@dataclass
class PitchScene:
    players: list[PlayerState]
    ball_from: tuple[float, float]
    ball_to: tuple[float, float]
    passer_index: int = 0
    pitch_length_m: float = 105.0
    pitch_width_m: float = 68.0

    def team_indices(self, team: str) -> list[int]:
        return [i for i, p in enumerate(self.players) if p.team == team]

    def validate(self) -> None:
        """Reject scenes that violate ingestion invariants.

        Construction stays cheap and unchecked; every external entry point
        (JSON ingestion, CLI, HTTP service) calls this before use.
        """
        if self.pitch_length_m <= 0 or self.pitch_width_m <= 0:
            raise SceneError("pitch dimensions must be positive")
        for name, pos in (("ball_from", self.ball_from), ("ball_to", self.ball_to)):
            if not self._inside(pos):
                raise SceneError(f"{name} {pos} lies outside the pitch rectangle")
        for i, p in enumerate(self.players):
            if p.team not in TEAMS:
                raise SceneError(f"players[{i}].team must be one of {TEAMS}, got {p.team!r}")
            if not self._inside(p.pos):
                raise SceneError(f"players[{i}].pos {p.pos} lies outside the pitch rectangle")
            if p.speed() > MAX_SPEED_MPS:
                raise SceneError(
                    f"players[{i}].vel speed {p.speed():.2f} m/s exceeds {MAX_SPEED_MPS} m/s"
                )
        offense = self.team_indices(OFFENSE)
        defense = self.team_indices(DEFENSE)
        for team, idx in ((OFFENSE, offense), (DEFENSE, defense)):
            if not 1 <= len(idx) <= 11:
                raise SceneError(f"{team} team must field 1..11 players, got {len(idx)}")
        if self.passer_index not in offense:
            raise SceneError(f"passer_index {self.passer_index} is not an offense player")

    def _inside(self, pos: tuple[float, float]) -> bool:
        return 0.0 <= pos[0] <= self.pitch_length_m and 0.0 <= pos[1] <= self.pitch_width_m


@dataclass(frozen=True)
class RasterConfig:
    width_px: int = 64
    height_px: int = 64
    offense_color: tuple[int, int, int] = (255, 0, 0)
    defense_color: tuple[int, int, int] = (0, 0, 255)
    ball_color: tuple[int, int, int] = (0, 0, 0)
    line_color: tuple[int, int, int] = (0, 0, 0)
    marker_radius_px: int = 2
    arrow_px_per_mps: float = 1.5
    dash_on_px: int = 3
    dash_off_px: int = 3

    def __post_init__(self):
        if self.width_px != self.height_px:
            raise SceneError("raster images are square: width_px must equal height_px")
        if self.width_px < 2:
            raise SceneError("raster side must be at least 2 px")
        if self.dash_on_px < 1 or self.dash_off_px < 0:
            raise SceneError("dash pattern needs dash_on_px >= 1 and dash_off_px >= 0")
        for name in ("offense_color", "defense_color", "ball_color", "line_color"):
            if tuple(getattr(self, name)) == WHITE:
                raise SceneError(f"{name} must differ from the white background")


def desk_raster_config() -> RasterConfig:
    """64x64 preset used for desk-scale training and tests."""
    return RasterConfig()


def paper_raster_config() -> RasterConfig:
    """224x224 preset matching the full-size input resolution."""
    return RasterConfig(
        width_px=224,
        height_px=224,
        marker_radius_px=7,
        arrow_px_per_mps=5.0,
        dash_on_px=7,
        dash_off_px=7,
    )


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise SceneError("RasterImage.pixels must be (H, W, 3) uint8")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def float_view(self) -> np.ndarray:
        """Model input: pixels / 255 exactly, float64 in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


# --- coordinate mapping ------------------------------------------------------

def normalize_position(
    pos: tuple[float, float], pitch_length_m: float, pitch_width_m: float
) -> tuple[float, float]:
    """Map a pitch position in metres onto [-1, 1] per axis.

    -1 and 1 are the two ends of each axis; the mapping is affine and
    independent per axis, so aspect ratio is not preserved.
    """
    x, y = pos
    if not (0.0 <= x <= pitch_length_m and 0.0 <= y <= pitch_width_m):
        raise SceneError(f"position {pos} lies outside the {pitch_length_m}x{pitch_width_m} pitch")
    return 2.0 * x / pitch_length_m - 1.0, 2.0 * y / pitch_width_m - 1.0


def round_half_away(v: float) -> int:
    """Round to nearest integer, exact halves away from zero.

    Fixed here (rather than banker's rounding of ``round``) so pixel
    placement is identical across platforms.
    """
    if v >= 0.0:
        return math.floor(v + 0.5)
    return math.ceil(v - 0.5)


def position_to_pixel(
    pos: tuple[float, float], scene: PitchScene, cfg: RasterConfig
) -> tuple[int, int]:
    """(row, col) of a pitch position; row 0 is the y = pitch_width edge."""
    xn, yn = normalize_position(pos, scene.pitch_length_m, scene.pitch_width_m)
    col = round_half_away((xn + 1.0) / 2.0 * (cfg.width_px - 1))
    row = round_half_away((1.0 - yn) / 2.0 * (cfg.height_px - 1))
    return row, col


def pixel_to_position(
    row: int, col: int, scene: PitchScene, cfg: RasterConfig
) -> tuple[float, float]:
    """Centre of a pixel in pitch metres (inverse of position_to_pixel up to rounding)."""
    xn = 2.0 * col / (cfg.width_px - 1) - 1.0
    yn = 1.0 - 2.0 * row / (cfg.height_px - 1)
    x = (xn + 1.0) / 2.0 * scene.pitch_length_m
    y = (yn + 1.0) / 2.0 * scene.pitch_width_m
    return x, y


# --- primitive draws ---------------------------------------------------------

def _round_half_even_ratio(num: int, den: int) -> int:
    """Round num/den to the nearest integer, exact halves to even.

    Pure integer arithmetic keeps line stepping bit-identical everywhere and
    symmetric under image reflections (even span => mirrored lines stay
    mirrored pixel for pixel).
    """
    q, r = divmod(num, den)
    twice = 2 * r
    if twice < den:
        return q
    if twice > den:
        return q + 1
    return q if q % 2 == 0 else q + 1


def _line_pixels(r0: int, c0: int, r1: int, c1: int):
    """8-connected pixels from (r0,c0) to (r1,c1), start to end, one per step."""
    steps = max(abs(r1 - r0), abs(c1 - c0))
    if steps == 0:
        yield r0, c0
        return
    dr, dc = r1 - r0, c1 - c0
    for s in range(steps + 1):
        yield (
            _round_half_even_ratio(r0 * steps + s * dr, steps),
            _round_half_even_ratio(c0 * steps + s * dc, steps),
        )


def _put(img: np.ndarray, r: int, c: int, color: tuple[int, int, int]) -> None:
    if 0 <= r < img.shape[0] and 0 <= c < img.shape[1]:
        img[r, c] = color


def _draw_line(img, r0, c0, r1, c1, color, dash_on=None, dash_off=0) -> None:
    period = None if dash_on is None else dash_on + dash_off
    for s, (r, c) in enumerate(_line_pixels(r0, c0, r1, c1)):
        if period is None or s % period < dash_on:
            _put(img, r, c, color)


def _draw_disk(img, r0, c0, radius, color) -> None:
    rr = radius * radius
    for r in range(r0 - radius, r0 + radius + 1):
        for c in range(c0 - radius, c0 + radius + 1):
            if (r - r0) ** 2 + (c - c0) ** 2 <= rr:
                _put(img, r, c, color)


# --- scene rendering ---------------------------------------------------------

def rasterize_scene(scene: PitchScene, cfg: RasterConfig) -> RasterImage:
    """Render a scene onto a white background, later draws overwriting earlier.

    Pure function of (scene, cfg): identical bytes across runs and platforms.
    """
    img = np.full((cfg.height_px, cfg.width_px, 3), 255, dtype=np.uint8)

    fr, fc = position_to_pixel(scene.ball_from, scene, cfg)
    tr, tc = position_to_pixel(scene.ball_to, scene, cfg)
    _draw_line(img, fr, fc, tr, tc, cfg.line_color, cfg.dash_on_px, cfg.dash_off_px)

    for p in scene.players:
        color = cfg.offense_color if p.team == OFFENSE else cfg.defense_color
        r0, c0 = position_to_pixel(p.pos, scene, cfg)
        r1 = round_half_away(r0 - p.vel[1] * cfg.arrow_px_per_mps)
        c1 = round_half_away(c0 + p.vel[0] * cfg.arrow_px_per_mps)
        _draw_line(img, r0, c0, r1, c1, color)

    for p in scene.players:
        color = cfg.offense_color if p.team == OFFENSE else cfg.defense_color
        r0, c0 = position_to_pixel(p.pos, scene, cfg)
        _draw_disk(img, r0, c0, cfg.marker_radius_px, color)

    for pos in (scene.ball_from, scene.ball_to):
        r0, c0 = position_to_pixel(pos, scene, cfg)
        _draw_disk(img, r0, c0, cfg.marker_radius_px, cfg.ball_color)

    return RasterImage(img)


HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def flip_image(img: RasterImage, axis: str) -> RasterImage:
    """Exact column (horizontal) or row (vertical) reversal; an involution."""
    if axis == HORIZONTAL:
        return RasterImage(np.ascontiguousarray(img.pixels[:, ::-1, :]))
    if axis == VERTICAL:
        return RasterImage(np.ascontiguousarray(img.pixels[::-1, :, :]))
    raise SceneError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def mirror_scene(scene: PitchScene, axis: str) -> PitchScene:
    """Reflect a scene about the pitch midline (x for horizontal, y for vertical)."""
    if axis == HORIZONTAL:
        def pos(p):
            return (scene.pitch_length_m - p[0], p[1])

        def vel(v):
            return (-v[0], v[1])
    elif axis == VERTICAL:
        def pos(p):
            return (p[0], scene.pitch_width_m - p[1])

        def vel(v):
            return (v[0], -v[1])
    else:
        raise SceneError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")
    return PitchScene(
        players=[PlayerState(p.team, pos(p.pos), vel(p.vel)) for p in scene.players],
        ball_from=pos(scene.ball_from),
        ball_to=pos(scene.ball_to),
        passer_index=scene.passer_index,
        pitch_length_m=scene.pitch_length_m,
        pitch_width_m=scene.pitch_width_m,
    )


# --- target zone -------------------------------------------------------------

def in_target_zone(
    ball_to: tuple[float, float], pitch_length_m: float = 105.0, pitch_width_m: float = 68.0
) -> bool:
    """True iff the arrival point lies within 30 m of the attacked goal centre.

    "Within 30 m of the goal" is read as radial Euclidean distance from the
    midpoint of the goal line at x = pitch_length (attack toward positive x),
    not as a strip from the goal line.
    """
    gx, gy = pitch_length_m, pitch_width_m / 2.0
    return math.hypot(ball_to[0] - gx, ball_to[1] - gy) <= TARGET_ZONE_RADIUS_M


# --- serialization -----------------------------------------------------------

def scene_to_dict(scene: PitchScene) -> dict:
    return {
        "v": SCENE_SCHEMA_VERSION,
        "pitch_length_m": scene.pitch_length_m,
        "pitch_width_m": scene.pitch_width_m,
        "players": [
            {"team": p.team, "pos": list(p.pos), "vel": list(p.vel)} for p in scene.players
        ],
        "ball_from": list(scene.ball_from),
        "ball_to": list(scene.ball_to),
        "passer_index": scene.passer_index,
    }


def scene_from_dict(d: dict, validate: bool = True) -> PitchScene:
    try:
        scene = PitchScene(
            players=[
                PlayerState(
                    team=str(p["team"]),
                    pos=(float(p["pos"][0]), float(p["pos"][1])),
                    vel=(float(p["vel"][0]), float(p["vel"][1])),
                )
                for p in d["players"]
            ],
            ball_from=(float(d["ball_from"][0]), float(d["ball_from"][1])),
            ball_to=(float(d["ball_to"][0]), float(d["ball_to"][1])),
            passer_index=int(d.get("passer_index", 0)),
            pitch_length_m=float(d.get("pitch_length_m", 105.0)),
            pitch_width_m=float(d.get("pitch_width_m", 68.0)),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise SceneError(f"malformed scene object: {exc!r}") from exc
    if validate:
        scene.validate()
    return scene


def scene_to_json(scene: PitchScene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def scene_from_json(text: str, validate: bool = True) -> PitchScene:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"invalid scene JSON: {exc}") from exc
    return scene_from_dict(d, validate=validate)


def raster_config_to_dict(cfg: RasterConfig) -> dict:
    return asdict(cfg)


def raster_config_from_dict(d: dict) -> RasterConfig:
    d = dict(d)
    for key in ("offense_color", "defense_color", "ball_color", "line_color"):
        if key in d:
            d[key] = tuple(d[key])
    return RasterConfig(**d)


def write_png(img: RasterImage, path, metadata: dict | None = None) -> None:
    """PNG for inspection; metadata (e.g. a config hash) goes into text chunks."""
    info = None
    if metadata:
        from PIL.PngImagePlugin import PngInfo

        info = PngInfo()
        for key, value in sorted(metadata.items()):
            info.add_text(str(key), str(value))
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG", pnginfo=info)


def read_png(path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
