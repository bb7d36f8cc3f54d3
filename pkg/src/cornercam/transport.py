"""Transient photon rates from vertical rectangular facets.

Two routes compute the same quantity, the three-bounce
laser spot -> facet -> floor pixel response binned in time:

* :func:`fast_rates` approximates each time bin's contribution by a
  fraction of an annulus between consecutive iso-delay ellipses on the
  facet plane, evaluating the integrand once per annulus segment.
* :func:`oracle_rates` integrates by dense midpoint sampling of the facet
  (and optionally of the pixel footprint).

Rates are expected counts per second of integration; multiply by a frame
time to get expected counts.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cube import TransientCube
from .errors import DegenerateFacet, ResolutionTooCoarse
from .geometry import (
    SPEED_OF_LIGHT,
    EdgeSpec,
    as_point,
    bin_to_distance,
    distance_to_bin,
    round_trip_bounds,
)

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class SensorConfig:
    """Fixed acquisition geometry: laser spot, SPAD pixel centers, time bins."""

    laser: np.ndarray
    pixels: np.ndarray
    pixel_area: float
    bin_width: float
    n_bins: int
    t0: float = 0.0
    intensity: float = 1.0
    edge: EdgeSpec = field(default_factory=EdgeSpec)
    laser_normal: np.ndarray = field(default_factory=lambda: _UP.copy())
    floor_normal: np.ndarray = field(default_factory=lambda: _UP.copy())

    def __post_init__(self):
        laser = as_point(self.laser)
        pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 3)
        if len(pixels) < 1 or self.n_bins < 1:
            raise ValueError("need at least one pixel and one bin")
        if self.bin_width <= 0 or self.pixel_area <= 0:
            raise ValueError("bin width and pixel area must be positive")
        if abs(laser[2]) > 1e-12 or np.any(np.abs(pixels[:, 2]) > 1e-12):
            raise ValueError("laser spot and pixel centers must lie on the floor (z = 0)")
        object.__setattr__(self, "laser", laser)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "n_bins", int(self.n_bins))

    @classmethod
    def grid(cls, laser, fov_center, fov_size, n_side, **kw) -> "SensorConfig":
        """Square-pixel grid over a rectangular floor field of view."""
        fov_center = as_point(fov_center)
        sx, sy = (fov_size, fov_size) if np.isscalar(fov_size) else fov_size
        nx, ny = (n_side, n_side) if np.isscalar(n_side) else n_side
        px, py = sx / nx, sy / ny
        xs = fov_center[0] - sx / 2 + px * (np.arange(nx) + 0.5)
        ys = fov_center[1] - sy / 2 + py * (np.arange(ny) + 0.5)
        X, Y = np.meshgrid(xs, ys)
        pixels = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
        kw.setdefault("pixel_area", px * py)
        return cls(laser=laser, pixels=pixels, **kw)

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)

    @property
    def fov_center(self) -> np.ndarray:
        return self.pixels.mean(axis=0)

    @property
    def pixel_azimuths(self) -> np.ndarray:
        return self.edge.floor_azimuth(self.pixels)

    @property
    def bin_length(self) -> float:
        """Round-trip distance spanned by one bin."""
        return SPEED_OF_LIGHT * self.bin_width

    def bin_centers(self) -> np.ndarray:
        """Round-trip distance at the center of every bin."""
        return bin_to_distance(np.arange(self.n_bins) + 0.5, self.bin_width, self.t0)

    def empty_cube(self, frame_time: float = 1.0) -> TransientCube:
        return TransientCube(np.zeros((self.n_pixels, self.n_bins)), self.bin_width, self.t0, frame_time)


@dataclass(frozen=True, eq=False)
class Panel:
    """Vertical rectangle standing on the floor segment ``p1``-``p2``.

    ``normal`` is horizontal; when omitted it is oriented toward the edge
    base of whichever sensor the panel is rendered for.
    """

    p1: np.ndarray
    p2: np.ndarray
    height: float
    albedo: float = 1.0
    normal: np.ndarray | None = None

    def __post_init__(self):
        p1, p2 = as_point(self.p1), as_point(self.p2)
        if abs(p1[2]) > 1e-12 or abs(p2[2]) > 1e-12:
            raise ValueError("panels must rest on the floor")
        if np.linalg.norm(p2 - p1) <= 1e-12:
            raise DegenerateFacet("panel bottom vertices coincide")
        if self.height <= 0 or self.albedo < 0:
            raise ValueError("panel height must be positive and albedo nonnegative")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)
        if self.normal is not None:
            n = as_point(self.normal).copy()
            n[2] = 0.0
            if np.linalg.norm(n) <= 1e-12:
                raise ValueError("panel normal must have a horizontal component")
            object.__setattr__(self, "normal", n / np.linalg.norm(n))

    @property
    def width(self) -> float:
        return float(np.linalg.norm(self.p2 - self.p1))

    @property
    def tangent(self) -> np.ndarray:
        return (self.p2 - self.p1) / self.width

    def vertices(self) -> np.ndarray:
        up = self.height * _UP
        return np.array([self.p1, self.p2, self.p2 + up, self.p1 + up])

    def facing(self, toward) -> np.ndarray:
        if self.normal is not None:
            return self.normal
        t = self.tangent
        n = np.array([-t[1], t[0], 0.0])
        if n @ (as_point(toward) - self.p1) < 0:
            n = -n
        return n

    def with_albedo(self, albedo: float) -> "Panel":
        return Panel(self.p1, self.p2, self.height, albedo, self.normal)


@dataclass(frozen=True)
class FacetParams:
    """Edge-facing facet: angular extent around the edge, albedo, range, height."""

    theta_min: float
    theta_max: float
    albedo: float
    range: float
    height: float

    def __post_init__(self):
        if not (0.0 <= self.theta_min < self.theta_max <= math.pi):
            raise ValueError(f"need 0 <= theta_min < theta_max <= pi, got {self.theta_min}, {self.theta_max}")
        if self.range <= 0 or self.height <= 0 or self.albedo < 0:
            raise ValueError("range and height must be positive, albedo nonnegative")

    @property
    def theta_mid(self) -> float:
        return 0.5 * (self.theta_min + self.theta_max)

    @property
    def width(self) -> float:
        return 2 * self.range * math.tan(0.5 * (self.theta_max - self.theta_min))

    def to_panel(self, edge: EdgeSpec) -> Panel:
        half = 0.5 * (self.theta_max - self.theta_min)
        reach = self.range / math.cos(half)
        p1 = edge.base + reach * edge.direction(self.theta_min)
        p2 = edge.base + reach * edge.direction(self.theta_max)
        return Panel(p1, p2, self.height, self.albedo, normal=-edge.direction(self.theta_mid))

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta_min, self.theta_max, self.albedo, self.range, self.height])


@dataclass(frozen=True)
class QuadratureSettings:
    d_max_annulus: float = 0.25
    oracle_resolution: float = 250.0  # samples per meter on the facet
    pixel_subsamples: int = 1  # per side; 1 = pixel-center approximation

    def __post_init__(self):
        if self.d_max_annulus <= 0:
            raise ValueError("d_max_annulus must be positive")
        if self.oracle_resolution < 2 or self.pixel_subsamples < 1:
            raise ValueError("oracle resolution must be >= 2 samples per meter")


def _as_panel(facet, sensor: SensorConfig) -> Panel:
    return facet.to_panel(sensor.edge) if isinstance(facet, FacetParams) else facet


def brdf_G(p_s, p_l, p_f, n_l, n_s, n_f):
    """Product of the four Lambertian foreshortening cosines, back-facing -> 0.

    Broadcasts over leading axes.
    """
    p_s, p_l, p_f = (np.asarray(v, dtype=float) for v in (p_s, p_l, p_f))
    to_s_from_l = p_s - p_l
    to_f_from_s = p_f - p_s
    r1 = np.linalg.norm(to_s_from_l, axis=-1)
    r2 = np.linalg.norm(to_f_from_s, axis=-1)
    c1 = np.sum(to_s_from_l * n_l, axis=-1) / r1
    c2 = np.sum(-to_s_from_l * n_s, axis=-1) / r1
    c3 = np.sum(to_f_from_s * n_s, axis=-1) / r2
    c4 = np.sum(-to_f_from_s * n_f, axis=-1) / r2
    return np.maximum(c1, 0) * np.maximum(c2, 0) * np.maximum(c3, 0) * np.maximum(c4, 0)


def annulus_area(theta_min, theta_max, r_start, r_stop):
    """Area of the angular fraction of a circular annulus."""
    return 0.5 * (theta_max - theta_min) * (r_stop**2 - r_start**2)


def _visible_span(panel: Panel, sensor: SensorConfig):
    """Per pixel, the sub-interval [s_lo, s_hi] of the panel width it can see."""
    edge = sensor.edge
    gamma = sensor.pixel_azimuths
    w = panel.width
    t = panel.tangent[:2]
    a1 = float(edge.hidden_azimuth(panel.p1))
    a2 = float(edge.hidden_azimuth(panel.p2))
    e = edge.direction(gamma)[:, :2]
    rel = panel.p1[:2] - edge.base[:2]
    cross_et = e[:, 0] * t[1] - e[:, 1] * t[0]
    cross_er = e[:, 0] * rel[1] - e[:, 1] * rel[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_g = np.clip(-cross_er / cross_et, 0.0, w)
    full = max(a1, a2) <= gamma
    none = min(a1, a2) > gamma
    if a2 >= a1:
        s_lo = np.zeros_like(gamma)
        s_hi = np.where(full, w, np.where(none, 0.0, s_g))
    else:
        s_lo = np.where(full, 0.0, np.where(none, w, s_g))
        s_hi = np.full_like(gamma, w)
    return s_lo, s_hi


def _plane_ellipse(d, m, wt, wu, tu, ww):
    """Iso-delay ellipse on a vertical plane: center (horizontal), A (horizontal), B (vertical).

    The plane is parametrized as ``p1 + s*t + z*up``; ``w* / t*`` are dot
    products of ``p1 - focal_center`` and ``t`` with the focal axis ``u``.
    Missing intersections give ``A = B = 0``.
    """
    a2 = (d * d - m * m) / 4
    ok = a2 > 0
    a2 = np.where(ok, a2, 1.0)
    inv_a2 = 1.0 / a2
    kap = 4.0 / np.where(ok, d * d, 1.0) - inv_a2
    alpha2 = inv_a2 + kap * tu * tu
    alpha1 = wt * inv_a2 + kap * wu * tu
    alpha0 = ww * inv_a2 + kap * wu * wu
    s_c = -alpha1 / alpha2
    rho = np.where(ok, 1.0 - alpha0 + alpha1 * alpha1 / alpha2, 0.0)
    rho = np.maximum(rho, 0.0)
    return s_c, np.sqrt(rho / alpha2), np.sqrt(rho * a2)


def _radius_cs(c, s, A, B):
    """Polar radius from precomputed cos/sin of the polar angle; 0 for empty ellipses."""
    den = np.sqrt((B * c) ** 2 + (A * s) ** 2)
    ok = den > 0
    return np.where(ok, A * B / np.where(ok, den, 1.0), 0.0)


def fast_rates(facet, sensor: SensorConfig, quad: QuadratureSettings = QuadratureSettings()) -> np.ndarray:
    """Annulus-quadrature response of one facet, shape ``(n_pixels, n_bins)``."""
    panel = _as_panel(facet, sensor)
    N, K = sensor.n_pixels, sensor.n_bins
    out = np.zeros((N, K))
    if panel.albedo == 0:
        return out

    s_lo, s_hi = _visible_span(panel, sensor)
    rows = np.nonzero(s_hi - s_lo > 1e-12)[0]
    if rows.size == 0:
        return out
    s_lo, s_hi = s_lo[rows, None], s_hi[rows, None]
    L = sensor.laser
    F = sensor.pixels[rows]
    t = panel.tangent
    h = panel.height
    n_s = panel.facing(sensor.edge.base)

    d_min, d_max = round_trip_bounds(L, F, panel.p1 + s_lo * t, panel.p1 + s_hi * t, h)
    k_min = np.maximum(distance_to_bin(d_min, sensor.bin_width, sensor.t0), 0)
    k_max = np.minimum(distance_to_bin(d_max, sensor.bin_width, sensor.t0), K - 1)
    J = int(np.max(k_max - k_min, initial=-1)) + 1
    if J <= 0:
        return out
    k = k_min[:, None] + np.arange(J)
    valid = k <= k_max[:, None]

    d_lo = np.maximum(bin_to_distance(k, sensor.bin_width, sensor.t0), d_min[:, None])
    d_hi = np.minimum(bin_to_distance(k + 1, sensor.bin_width, sensor.t0), d_max[:, None])
    d_mid = 0.5 * (d_lo + d_hi)

    c = 0.5 * (L + F)
    diff = F - L
    m = np.linalg.norm(diff, axis=1)
    u = np.where((m > 0)[:, None], diff / np.where(m > 0, m, 1.0)[:, None], np.array([1.0, 0.0, 0.0]))
    w0 = panel.p1 - c
    geo = dict(
        m=m[:, None],
        wt=(w0 @ t)[:, None],
        wu=np.sum(w0 * u, axis=1)[:, None],
        tu=(u @ t)[:, None],
        ww=np.sum(w0 * w0, axis=1)[:, None],
    )
    _, A_lo, B_lo = _plane_ellipse(d_lo, **geo)
    _, A_hi, B_hi = _plane_ellipse(d_hi, **geo)
    sc, A, B = _plane_ellipse(d_mid, **geo)

    has_mid = valid & (A > 0)
    A_safe = np.where(has_mid, A, 1.0)
    B_safe = np.where(has_mid, B, 1.0)
    tau_a = np.arccos(np.clip((s_hi - sc) / A_safe, -1.0, 1.0))
    tau_b = np.arccos(np.clip((s_lo - sc) / A_safe, -1.0, 1.0))
    tau_h = np.arcsin(np.clip(h / B_safe, 0.0, 1.0))
    intervals = [(tau_a, np.minimum(tau_b, tau_h)), (np.maximum(tau_a, math.pi - tau_h), tau_b)]

    scale = sensor.pixel_area * sensor.intensity * panel.albedo
    acc = np.zeros_like(d_mid)
    big = np.maximum(A, B)
    # positions relative to p1; the facet point is p1 + s*t + z*up
    tx, ty = t[0], t[1]
    lx, ly = L[0] - panel.p1[0], L[1] - panel.p1[1]
    fx, fy = (F[:, 0] - panel.p1[0])[:, None], (F[:, 1] - panel.p1[1])[:, None]
    nsx, nsy = n_s[0], n_s[1]
    nl, nf = sensor.laser_normal, sensor.floor_normal
    for lo, hi in intervals:
        span = np.where(has_mid, np.maximum(hi - lo, 0.0), 0.0)
        pieces = np.where(span > 0, np.ceil(big * span / quad.d_max_annulus), 0).astype(int)
        pieces = np.where(span > 0, np.maximum(pieces, 1), 0)
        step = span / np.maximum(pieces, 1)
        phi_a = np.arctan2(B * np.sin(lo), A * np.cos(lo))
        for p in range(int(pieces.max(initial=0))):
            tb = lo + (p + 1) * step
            phi_b = np.arctan2(B * np.sin(tb), A * np.cos(tb))
            phi = 0.5 * (phi_a + phi_b)
            cp, sp = np.cos(phi), np.sin(phi)
            R_lo = _radius_cs(cp, sp, A_lo, B_lo)
            R_hi = _radius_cs(cp, sp, A_hi, B_hi)
            R_mid = _radius_cs(cp, sp, A, B)
            area = np.maximum(annulus_area(phi_a, phi_b, R_lo, R_hi), 0.0)
            s_pt = sc + R_mid * cp
            z = R_mid * sp
            px, py = s_pt * tx, s_pt * ty
            dlx, dly = px - lx, py - ly
            dfx, dfy = px - fx, py - fy
            z2 = z * z
            r1sq = dlx * dlx + dly * dly + z2
            r2sq = dfx * dfx + dfy * dfy + z2
            # the four foreshortening cosines, each still scaled by its distance
            c1 = np.maximum(dlx * nl[0] + dly * nl[1] + z * nl[2], 0.0)
            c2 = np.maximum(-(dlx * nsx + dly * nsy), 0.0)
            c3 = np.maximum(-(dfx * nsx + dfy * nsy), 0.0)
            c4 = np.maximum(dfx * nf[0] + dfy * nf[1] + z * nf[2], 0.0)
            term = area * (c1 * c2 * c3 * c4) / (r1sq * r1sq * r2sq * r2sq)
            acc += np.where(p < pieces, term, 0.0)
            phi_a = phi_b

    rr = np.broadcast_to(rows[:, None], k.shape)
    out[rr[valid], k[valid]] = scale * acc[valid]
    return out


def oracle_rates(
    facet,
    sensor: SensorConfig,
    quad: QuadratureSettings = QuadratureSettings(),
    workers: int = 1,
) -> np.ndarray:
    """Dense midpoint-rule integration of the facet response, shape ``(n_pixels, n_bins)``."""
    panel = _as_panel(facet, sensor)
    N, K = sensor.n_pixels, sensor.n_bins
    out = np.zeros((N, K))
    res = quad.oracle_resolution
    ns = max(1, math.ceil(panel.width * res))
    nz = max(1, math.ceil(panel.height * res))
    if ns * nz < 4:
        raise ResolutionTooCoarse(f"only {ns * nz} samples on the facet; raise the oracle resolution")
    if panel.albedo == 0:
        return out

    s = (np.arange(ns) + 0.5) * panel.width / ns
    z = (np.arange(nz) + 0.5) * panel.height / nz
    S, Z = np.meshgrid(s, z, indexing="ij")
    pts = panel.p1 + S.reshape(-1, 1) * panel.tangent + Z.reshape(-1, 1) * _UP
    dA = panel.width * panel.height / (ns * nz)
    n_s = panel.facing(sensor.edge.base)
    L = sensor.laser

    to_s = pts - L
    r1 = np.linalg.norm(to_s, axis=1)
    c1 = np.maximum(to_s @ sensor.laser_normal / r1, 0.0)
    c2 = np.maximum(-(to_s @ n_s) / r1, 0.0)
    laser_leg = c1 * c2 / r1**2 * dA
    keep = laser_leg > 0
    pts, r1, laser_leg = pts[keep], r1[keep], laser_leg[keep]
    alpha = sensor.edge.hidden_azimuth(pts)
    gamma_all = sensor.pixel_azimuths

    sub = quad.pixel_subsamples
    side = math.sqrt(sensor.pixel_area)
    offs = (np.arange(sub) + 0.5) / sub * side - side / 2
    OX, OY = np.meshgrid(offs, offs)
    offsets = np.column_stack([OX.ravel(), OY.ravel(), np.zeros(OX.size)])
    inv_c_dt = 1.0 / (SPEED_OF_LIGHT * sensor.bin_width)
    k_shift = sensor.t0 / sensor.bin_width
    scale = sensor.pixel_area * sensor.intensity * panel.albedo / len(offsets)

    def render(n: int) -> None:
        row = np.zeros(K)
        for off in offsets:
            f = sensor.pixels[n] + off
            gamma = sensor.edge.floor_azimuth(f) if sub > 1 else gamma_all[n]
            to_f = f - pts
            r2 = np.linalg.norm(to_f, axis=1)
            c3 = np.maximum(to_f @ n_s / r2, 0.0)
            c4 = np.maximum(-(to_f @ sensor.floor_normal) / r2, 0.0)
            wgt = laser_leg * c3 * c4 / r2**2 * (alpha <= gamma)
            kk = np.floor(k_shift + (r1 + r2) * inv_c_dt).astype(int)
            inside = (kk >= 0) & (kk < K)
            row += np.bincount(kk[inside], weights=wgt[inside], minlength=K)
        out[n] = scale * row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, range(N)))
    else:
        for n in range(N):
            render(n)
    return out


def facet_response_fast(facet, sensor: SensorConfig, quad: QuadratureSettings = QuadratureSettings()) -> TransientCube:
    return TransientCube(fast_rates(facet, sensor, quad), sensor.bin_width, sensor.t0, 1.0)


def facet_response_oracle(
    facet, sensor: SensorConfig, quad: QuadratureSettings = QuadratureSettings(), workers: int = 1
) -> TransientCube:
    return TransientCube(oracle_rates(facet, sensor, quad, workers), sensor.bin_width, sensor.t0, 1.0)


def relative_l1(exact: np.ndarray, approx: np.ndarray) -> float:
    return float(np.abs(exact - approx).sum() / np.abs(exact).sum())


def shadow_panel(fg: Panel, occluder, plane, albedo: float, clip_to: Panel | None = None) -> Panel | None:
    """Rectangular approximation of the region of ``plane`` hidden from ``occluder`` by ``fg``.

    The floor trace comes from the projected bottom corners and the height
    from the mean of the projected top corners. With ``clip_to`` the result
    is trimmed to that panel's extent; ``None`` is returned when nothing
    remains.
    """
    from .geometry import project_occluded_vertices

    proj = project_occluded_vertices(fg.vertices(), occluder, plane)
    b1, b2 = proj[0].copy(), proj[1].copy()
    b1[2] = b2[2] = 0.0
    height = 0.5 * (proj[2, 2] + proj[3, 2])
    if clip_to is not None:
        t = clip_to.tangent
        s1, s2 = sorted(((b1 - clip_to.p1) @ t, (b2 - clip_to.p1) @ t))
        s1, s2 = max(s1, 0.0), min(s2, clip_to.width)
        height = min(height, clip_to.height)
        if s2 - s1 <= 1e-9:
            return None
        b1, b2 = clip_to.p1 + s1 * t, clip_to.p1 + s2 * t
    if height <= 1e-9 or np.linalg.norm(b2 - b1) <= 1e-9:
        return None
    return Panel(b1, b2, height, albedo, normal=plane.normal)
