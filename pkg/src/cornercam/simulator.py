"""Synthetic hidden scenes, composed rate cubes and Poisson photon counts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .cube import TransientCube, load_cube, save_cube  # noqa: F401  (re-exported)
from .errors import ConfigError, MissingBackground
from .geometry import EdgeSpec, PlaneSpec, distance_to_bin, round_trip
from .transport import FacetParams, Panel, QuadratureSettings, SensorConfig, fast_rates, oracle_rates, shadow_panel

log = logging.getLogger(__name__)


@dataclass
class SceneDescription:
    """Stationary hidden scenery plus flat count floors.

    ``ambient_rate`` and ``dark_rate`` are counts per bin per pixel per
    second. ``ballistic_rate`` (counts per pixel per second) places the
    direct laser-spot return in its bin; zero disables it.
    """

    panels: list[Panel] = field(default_factory=list)
    ambient_rate: float = 0.0
    dark_rate: float = 0.0
    ballistic_rate: float = 0.0
    hot_pixels: tuple[int, ...] = ()
    hot_rate: float = 0.0

    def __post_init__(self):
        for name in ("ambient_rate", "dark_rate", "ballistic_rate", "hot_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative")


@dataclass
class Frame:
    objects: list = field(default_factory=list)  # FacetParams or Panel
    laser_gain: float = 1.0


@dataclass
class FrameScript:
    frames: list[Frame]
    frame_time: float = 0.4

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a frame script needs at least one frame")
        if self.frame_time <= 0:
            raise ValueError("frame time must be positive")


def _render(panel: Panel, sensor: SensorConfig, quad: QuadratureSettings, renderer: str) -> np.ndarray:
    if renderer == "oracle":
        return oracle_rates(panel, sensor, quad)
    return fast_rates(panel, sensor, quad)


def stationary_rates(
    scene: SceneDescription,
    sensor: SensorConfig,
    quad: QuadratureSettings = QuadratureSettings(),
    renderer: str = "fast",
    laser_gain: float = 1.0,
) -> np.ndarray:
    """Per-second rates of the stationary scene, ``b``."""
    laser = np.zeros((sensor.n_pixels, sensor.n_bins))
    for p in scene.panels:
        laser += _render(p, sensor, quad, renderer)
    if scene.ballistic_rate > 0:
        k = distance_to_bin(round_trip(sensor.laser, sensor.pixels, sensor.pixels), sensor.bin_width, sensor.t0)
        ok = (k >= 0) & (k < sensor.n_bins)
        laser[np.nonzero(ok)[0], k[ok]] += scene.ballistic_rate
    out = laser_gain * laser + scene.ambient_rate + scene.dark_rate
    if scene.hot_pixels:
        out[list(scene.hot_pixels)] += scene.hot_rate
    return out


def _ray_hit(origin: np.ndarray, direction: np.ndarray, panel: Panel) -> float | None:
    """Floor-plane distance along a ray to a panel's floor trace, if hit."""
    d = direction[:2]
    e = panel.p2[:2] - panel.p1[:2]
    rel = panel.p1[:2] - origin[:2]
    den = d[0] * e[1] - d[1] * e[0]
    if abs(den) < 1e-12:
        return None
    t = (rel[0] * e[1] - rel[1] * e[0]) / den
    u = (rel[0] * d[1] - rel[1] * d[0]) / den
    if t > 1e-9 and -1e-9 <= u <= 1 + 1e-9:
        return t
    return None


def background_behind(fg: Panel, occluder, panels: list[Panel]) -> Panel:
    """First stationary panel hit by the ray from ``occluder`` through the facet's base center."""
    o = np.asarray(occluder, dtype=float)
    c = 0.5 * (fg.p1 + fg.p2)
    direction = c - o
    reach = np.linalg.norm(direction[:2])
    best, best_t = None, math.inf
    for p in panels:
        t = _ray_hit(o, direction / reach, p)
        if t is not None and reach < t < best_t:
            best, best_t = p, t
    if best is None:
        raise MissingBackground("no stationary panel behind the moving facet")
    return best


def shadow_panels(fg: Panel, sensor: SensorConfig, panels: list[Panel]) -> list[Panel]:
    """Occluded background regions seen from the laser spot and from the FOV center."""
    out = []
    for occluder in (sensor.laser, sensor.fov_center):
        bg = background_behind(fg, occluder, panels)
        normal = bg.facing(sensor.edge.base)
        sp = shadow_panel(fg, occluder, PlaneSpec(normal, bg.p1), bg.albedo, clip_to=bg)
        if sp is not None:
            out.append(sp)
    return out


def mutual_shadows(fg: Panel, movers: list[Panel], sensor: SensorConfig) -> list[Panel]:
    """Parts of farther moving facets hidden behind ``fg``.

    Uses the same rectangular shadow approximation as for the walls, but
    the laser and camera views are combined by union (one rectangle
    spanning both), since a facet cannot lose more than its own light.
    """
    out = []
    for other in movers:
        if other is fg:
            continue
        spans = []
        for occluder in (sensor.laser, sensor.fov_center):
            o = np.asarray(occluder, dtype=float)
            c = 0.5 * (fg.p1 + fg.p2)
            d = c - o
            reach = np.linalg.norm(d[:2])
            t = _ray_hit(o, d / reach, other)
            if t is None or t <= reach:
                continue
            normal = other.facing(sensor.edge.base)
            sp = shadow_panel(fg, occluder, PlaneSpec(normal, other.p1), other.albedo, clip_to=other)
            if sp is not None:
                spans.append(sp)
        if spans:
            tang = other.tangent
            s_all = [(p - other.p1) @ tang for sp in spans for p in (sp.p1, sp.p2)]
            lo, hi = min(s_all), max(s_all)
            h = max(sp.height for sp in spans)
            out.append(Panel(other.p1 + lo * tang, other.p1 + hi * tang, h, other.albedo, normal=spans[0].normal))
    return out


def _panels_of(frame: Frame, edge: EdgeSpec) -> list[Panel]:
    return [o.to_panel(edge) if isinstance(o, FacetParams) else o for o in frame.objects]


def compose_frame_rates(
    scene: SceneDescription,
    frame: Frame,
    sensor: SensorConfig,
    frame_time: float = 1.0,
    quad: QuadratureSettings = QuadratureSettings(),
    renderer: str = "fast",
    background: np.ndarray | None = None,
) -> TransientCube:
    """Expected counts over ``frame_time`` for one scripted frame.

    ``background`` may pass in precomputed per-second stationary rates at
    unit laser gain to skip re-rendering the walls.
    """
    if background is None:
        background = stationary_rates(scene, sensor, quad, renderer)
    b = background
    if frame.laser_gain != 1.0:
        floor = scene.ambient_rate + scene.dark_rate
        hot = np.zeros_like(b)
        if scene.hot_pixels:
            hot[list(scene.hot_pixels)] = scene.hot_rate
        b = frame.laser_gain * (b - floor - hot) + floor + hot
    fg = np.zeros_like(b)
    oc = np.zeros_like(b)
    movers = _panels_of(frame, sensor.edge)
    for panel in movers:
        fg += _render(panel, sensor, quad, renderer)
        for sp in shadow_panels(panel, sensor, scene.panels):
            oc += _render(sp, sensor, quad, renderer)
        for hidden in mutual_shadows(panel, movers, sensor):
            oc += _render(hidden, sensor, quad, renderer)
    total = b + frame.laser_gain * (fg - oc)
    neg = total < 0
    if np.any(neg):
        log.warning("shadow model overshoots in %d cells; clamped to zero", int(neg.sum()))
        total = np.where(neg, 0.0, total)
    return TransientCube(total * frame_time, sensor.bin_width, sensor.t0, frame_time)


def row_streams(seed, n_rows: int) -> list[np.random.Generator]:
    """One independent generator per pixel row, derived from a single seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n_rows)]


def sample_counts(rates: TransientCube, frame_time: float | None = None, seed=0) -> TransientCube:
    """Poisson counts with means equal to the cube's expected counts.

    When ``frame_time`` differs from the cube's own, the means are rescaled
    first. Each pixel row draws from its own seeded stream, so the result
    does not depend on evaluation order.
    """
    if rates.kind != "rates":
        raise ValueError("sample_counts expects a rate cube")
    if frame_time is not None and frame_time != rates.frame_time:
        rates = rates.scaled_to(frame_time)
    lam = rates.values
    counts = np.empty(lam.shape, dtype=np.uint32)
    for row, rng in zip(range(lam.shape[0]), row_streams(seed, lam.shape[0])):
        counts[row] = rng.poisson(lam[row])
    return rates.with_values(counts, kind="counts")


def noisy_reference(b: TransientCube, reference_time: float, seed) -> TransientCube:
    """Reference estimate from a Poisson draw over ``reference_time``, renormalized to ``b``'s frame time."""
    counts = sample_counts(b, reference_time, seed)
    return b.with_values(counts.values.astype(float) * (b.frame_time / reference_time), kind="rates")


# ---------------------------------------------------------------- configs

SCHEMA_NAME = "config.schema.json"


def config_schema() -> dict:
    return json.loads(resources.files("cornercam").joinpath(SCHEMA_NAME).read_text())


def validate_config(cfg: dict) -> None:
    """Raise ConfigError naming the offending field path."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")


def _edge_from(cfg: dict) -> EdgeSpec:
    return EdgeSpec(
        base=cfg.get("base", [0.0, 0.0]),
        wall_direction=cfg.get("wall_direction", [-1.0, 0.0]),
        hidden_sign=cfg.get("hidden_sign", 1),
    )


def sensor_from_config(cfg: dict) -> SensorConfig:
    return SensorConfig.grid(
        laser=cfg["laser"],
        fov_center=cfg["fov_center"],
        fov_size=cfg["fov_size"],
        n_side=cfg["pixels_per_side"],
        bin_width=cfg["bin_width"],
        n_bins=cfg["n_bins"],
        t0=cfg.get("t0", 0.0),
        intensity=cfg.get("intensity", 1.0),
        edge=_edge_from(cfg.get("edge", {})),
    )


def object_from_config(obj: dict, edge: EdgeSpec):
    """Moving object as an edge-facing facet or an explicit panel."""
    albedo = obj.get("albedo", 1.0)
    if "p1" in obj:
        return Panel(obj["p1"], obj["p2"], obj["height"], albedo, obj.get("normal"))
    if "azimuth" in obj:
        half = math.atan2(obj["width"] / 2, obj["range"])
        return FacetParams(obj["azimuth"] - half, obj["azimuth"] + half, albedo, obj["range"], obj["height"])
    return FacetParams(obj["theta_min"], obj["theta_max"], albedo, obj["range"], obj["height"])


def quadrature_from_config(cfg: dict) -> QuadratureSettings:
    return QuadratureSettings(**cfg)


@dataclass
class Experiment:
    """Everything a config document describes, resolved into domain objects."""

    sensor: SensorConfig
    scene: SceneDescription
    script: FrameScript
    quad: QuadratureSettings
    reference_time: float | None
    renderer: str
    raw: dict

    def background(self) -> np.ndarray:
        return stationary_rates(self.scene, self.sensor, self.quad, self.renderer)

    def reference_rates(self, background: np.ndarray | None = None) -> TransientCube:
        b = self.background() if background is None else background
        return TransientCube(b * self.script.frame_time, self.sensor.bin_width, self.sensor.t0, self.script.frame_time)

    def frame_rates(self, index: int, background: np.ndarray | None = None) -> TransientCube:
        if background is None:
            background = self.background()
        return compose_frame_rates(
            self.scene, self.script.frames[index], self.sensor, self.script.frame_time, self.quad, self.renderer, background
        )


def calibrate_intensity(scene: SceneDescription, sensor: SensorConfig, quad, counts_per_pixel: float, frame_time: float):
    """Pulse intensity giving the requested mean wall counts per pixel per frame."""
    walls = sum(fast_rates(p, sensor, quad) for p in scene.panels)
    per_pixel = float(np.sum(walls)) / sensor.n_pixels * frame_time
    if per_pixel <= 0:
        raise ConfigError("calibration needs stationary panels visible to the sensor")
    return sensor.intensity * counts_per_pixel / per_pixel


def load_config(source) -> Experiment:
    """Parse and validate a config document (path or already-loaded dict)."""
    if isinstance(source, (str, Path)):
        try:
            cfg = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config ({exc.strerror})") from exc
    else:
        cfg = source
    validate_config(cfg)
    try:
        sensor = sensor_from_config(cfg["sensor"])
        sc = cfg.get("scene", {})
        panels = [Panel(p["p1"], p["p2"], p["height"], p.get("albedo", 1.0)) for p in sc.get("panels", [])]
        scene = SceneDescription(
            panels=panels,
            ambient_rate=sc.get("ambient_rate", 0.0),
            dark_rate=sc.get("dark_rate", 0.0),
            ballistic_rate=sc.get("ballistic_rate", 0.0),
            hot_pixels=tuple(sc.get("hot_pixels", ())),
            hot_rate=sc.get("hot_rate", 0.0),
        )
        fr = cfg.get("frames", {"items": [{"objects": []}]})
        frames = [
            Frame([object_from_config(o, sensor.edge) for o in item.get("objects", [])], item.get("laser_gain", 1.0))
            for item in fr.get("items", [])
        ]
        script = FrameScript(frames, fr.get("frame_time", 0.4))
        quad = quadrature_from_config(cfg.get("quadrature", {}))
        cal = cfg.get("calibration")
        if cal:
            intensity = calibrate_intensity(scene, sensor, quad, cal["counts_per_pixel"], script.frame_time)
            sensor = sensor_from_config({**cfg["sensor"], "intensity": intensity})
            if "ballistic_counts_per_pixel" in cal:
                scene.ballistic_rate = cal["ballistic_counts_per_pixel"] / script.frame_time
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"config error: {exc}") from exc
    ref = cfg.get("reference", {})
    return Experiment(
        sensor, scene, script, quad, ref.get("time"), cfg.get("renderer", "fast"), cfg
    )


def standard_room_config(objects: list[dict] | None = None, frames: list[dict] | None = None) -> dict:
    """Config dict for the scaled-down room: walls at x = -1.2, x = 1, y = 2.2, 3 m tall."""
    cfg = json.loads(resources.files("cornercam").joinpath("presets/standard_room.json").read_text())
    if frames is not None:
        cfg["frames"]["items"] = frames
    elif objects is not None:
        cfg["frames"]["items"] = [{"objects": objects}]
    return cfg
