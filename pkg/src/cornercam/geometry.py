"""Computational-geometry kernels for the corner camera.

All functions are pure. Points are numpy arrays of shape ``(3,)`` in meters;
the floor is the plane ``z = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateFacet,
    DegenerateIntersection,
    NoIntersection,
    RayParallelToPlane,
)

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact

_TANGENT_TOL = 1e-12


def as_point(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape == (2,):
        p = np.array([p[0], p[1], 0.0])
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"expected a finite 3-vector, got {p!r}")
    return p


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


@dataclass(frozen=True)
class EllipsoidSpec:
    """Prolate spheroid of points whose focal distances sum to ``d``.

    ``center`` and ``axis`` place it in the world; the defaults put the foci
    at ``(0, +-m/2, 0)``.
    """

    m: float
    d: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        if not (self.d > self.m >= 0):
            raise ValueError(f"need d > m >= 0, got m={self.m}, d={self.d}")
        object.__setattr__(self, "center", as_point(self.center))
        object.__setattr__(self, "axis", _unit(self.axis))

    @classmethod
    def from_foci(cls, f1, f2, d: float) -> "EllipsoidSpec":
        f1, f2 = as_point(f1), as_point(f2)
        m = float(np.linalg.norm(f2 - f1))
        axis = (f2 - f1) if m > 0 else np.array([0.0, 1.0, 0.0])
        return cls(m=m, d=float(d), center=(f1 + f2) / 2, axis=axis)

    @property
    def a_e(self) -> float:
        return float(np.sqrt((self.d / 2) ** 2 - (self.m / 2) ** 2))

    b_e = property(lambda self: self.d / 2)
    c_e = a_e

    @property
    def foci(self) -> tuple[np.ndarray, np.ndarray]:
        h = self.m / 2 * self.axis
        return self.center - h, self.center + h

    def quadratic_form(self) -> np.ndarray:
        """Matrix ``Q`` with ``(p - center)^T Q (p - center) = 1`` on the surface."""
        a2, b2 = self.a_e**2, self.b_e**2
        u = self.axis
        return np.eye(3) / a2 + (1 / b2 - 1 / a2) * np.outer(u, u)

    def level(self, p) -> float:
        w = np.asarray(p, dtype=float) - self.center
        return float(w @ self.quadratic_form() @ w)


@dataclass(frozen=True)
class PlaneSpec:
    normal: np.ndarray
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "normal", _unit(self.normal))
        object.__setattr__(self, "point", as_point(self.point))

    def basis(self) -> np.ndarray:
        """Orthonormal in-plane basis as the columns of a 3x2 matrix."""
        n = self.normal
        ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = _unit(np.cross(ref, n))
        e2 = np.cross(n, e1)
        return np.column_stack([e1, e2])


@dataclass(frozen=True)
class EllipseRS:
    """Ellipse ``r^2/A^2 + s^2/B^2 = 1`` in a planar frame (origin, r_axis, s_axis)."""

    A: float
    B: float
    origin: np.ndarray
    r_axis: np.ndarray
    s_axis: np.ndarray

    def to_world(self, r, s) -> np.ndarray:
        r = np.asarray(r, dtype=float)[..., None]
        s = np.asarray(s, dtype=float)[..., None]
        return self.origin + r * self.r_axis + s * self.s_axis

    def boundary(self, t) -> np.ndarray:
        """World points at parametric angle(s) ``t``."""
        t = np.asarray(t, dtype=float)
        return self.to_world(self.A * np.cos(t), self.B * np.sin(t))

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.r_axis, self.s_axis)


def ellipsoid_plane_intersection(e: EllipsoidSpec, p: PlaneSpec) -> EllipseRS:
    """Intersect a spheroid with a plane and return the translational form.

    The spheroid's quadratic form is restricted to an orthonormal in-plane
    basis anchored at ``p.point``; completing the square gives the ellipse
    center and the eigenvectors of the 2x2 form give the axes. ``A`` is the
    semi-major axis.
    """
    E = p.basis()
    Q = e.quadratic_form()
    w = p.point - e.center
    M = E.T @ Q @ E
    g = E.T @ Q @ w
    c0 = float(w @ Q @ w)
    x0 = -np.linalg.solve(M, g)
    rho = 1.0 - (c0 + float(g @ x0))
    if rho < -_TANGENT_TOL:
        raise NoIntersection(f"plane misses ellipsoid (level {1 - rho:.6g} > 1)")
    if rho <= _TANGENT_TOL:
        raise DegenerateIntersection("plane is tangent to ellipsoid")
    lam, V = np.linalg.eigh(M)  # ascending, so column 0 is the major axis
    A = float(np.sqrt(rho / lam[0]))
    B = float(np.sqrt(rho / lam[1]))
    r_axis = E @ V[:, 0]
    s_axis = np.cross(p.normal, r_axis)
    return EllipseRS(A=A, B=B, origin=p.point + E @ x0, r_axis=r_axis, s_axis=s_axis)


def ellipse_radius(theta, A, B):
    """Polar radius of a centered ellipse at polar angle ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return A * B / np.sqrt(B**2 * c**2 + A**2 * s**2)


@dataclass(frozen=True)
class EdgeSpec:
    """Thin vertical occluding edge.

    The wall is the floor ray from ``base`` along ``wall_direction``. The
    hidden side is to the left of the wall ray when ``hidden_sign`` is -1
    and to the right when +1 (looking along ``wall_direction`` from above).
    Hidden azimuths run from 0 on the boundary ray (opposite the wall) to
    pi along the wall; floor azimuths run from 0 along the wall to pi on the
    boundary ray.
    """

    base: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wall_direction: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0]))
    hidden_sign: int = 1

    def __post_init__(self):
        object.__setattr__(self, "base", as_point(self.base))
        w = _unit(np.asarray(self.wall_direction, dtype=float)[:2])
        object.__setattr__(self, "wall_direction", w)
        if self.hidden_sign not in (1, -1):
            raise ValueError("hidden_sign must be +1 or -1")

    @property
    def boundary_dir(self) -> np.ndarray:
        return -self.wall_direction

    @property
    def hidden_dir(self) -> np.ndarray:
        w = self.wall_direction
        return self.hidden_sign * np.array([w[1], -w[0]])

    def local(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Floor coordinates along the boundary ray and into the hidden side."""
        q = np.asarray(p, dtype=float)[..., :2] - self.base[:2]
        return q @ self.boundary_dir, q @ self.hidden_dir

    def direction(self, angle) -> np.ndarray:
        """Unit floor vector (3D) at hidden azimuth ``angle``."""
        angle = np.asarray(angle, dtype=float)
        v2 = np.cos(angle)[..., None] * self.boundary_dir + np.sin(angle)[..., None] * self.hidden_dir
        return np.concatenate([v2, np.zeros(v2.shape[:-1] + (1,))], axis=-1)

    def hidden_azimuth(self, p):
        """Azimuth alpha in [0, pi] of hidden-side point(s)."""
        x, y = self.local(p)
        y = np.where(y > 0, y, 0.0)
        return np.arctan2(y, x)

    def floor_azimuth(self, p):
        """Azimuth gamma in [0, pi] of visible-side floor point(s)."""
        x, y = self.local(p)
        # points on the wall line get +0.0 so atan2 returns pi, not -pi
        return np.arctan2(np.where(y < 0, -y, 0.0), -x)


def visibility(p_s, p_f, edge: EdgeSpec) -> int:
    """1 if floor point ``p_f`` sees hidden point ``p_s`` past the edge."""
    return int(edge.floor_azimuth(p_f) >= edge.hidden_azimuth(p_s))


def _foci_frame(p_l, p_f):
    """Origin, x-axis, y-axis (floor 2-vectors) with foci on the y-axis."""
    p_l = np.asarray(p_l, dtype=float)[..., :2]
    p_f = np.asarray(p_f, dtype=float)[..., :2]
    c = (p_l + p_f) / 2
    diff = p_f - p_l
    m = np.linalg.norm(diff, axis=-1)
    safe = np.where(m > 0, m, 1.0)[..., None]
    ey = np.where((m > 0)[..., None], diff / safe, np.array([0.0, 1.0]))
    ex = np.stack([ey[..., 1], -ey[..., 0]], axis=-1)
    return c, ex, ey, m


def round_trip(p_l, p_f, p):
    p = np.asarray(p, dtype=float)
    return np.linalg.norm(p - np.asarray(p_l), axis=-1) + np.linalg.norm(p - np.asarray(p_f), axis=-1)


def round_trip_bounds(p_l, p_f, v1, v2, height):
    """Vectorized extrema of the round-trip distance over a floor-standing facet.

    ``p_l``, ``p_f``, ``v1``, ``v2`` broadcast against each other (last axis
    is xyz). The facet is the vertical rectangle above segment v1-v2 with the
    given height. Returns ``(d_min, d_max)``.
    """
    p_l = np.asarray(p_l, dtype=float)
    p_f = np.asarray(p_f, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    c, ex, ey, m = _foci_frame(p_l, p_f)
    x1 = np.sum((v1[..., :2] - c) * ex, axis=-1)
    y1 = np.sum((v1[..., :2] - c) * ey, axis=-1)
    x2 = np.sum((v2[..., :2] - c) * ex, axis=-1)
    y2 = np.sum((v2[..., :2] - c) * ey, axis=-1)

    def rt(x, y):
        return np.hypot(x, y - m / 2) + np.hypot(x, y + m / 2)

    d_end = np.minimum(rt(x1, y1), rt(x2, y2))
    dx = x2 - x1
    scale = np.maximum(np.abs(dx) + np.abs(y2 - y1), 1e-300)
    vertical = np.abs(dx) <= 1e-12 * scale

    with np.errstate(divide="ignore", invalid="ignore"):
        m_line = np.where(vertical, 0.0, (y2 - y1) / np.where(vertical, 1.0, dx))
        b_line = -x1 * m_line + y1
        # line through the focal segment: the minimum over the line is m, at x = 0
        crosses = np.abs(b_line) <= m / 2
        d_int = 2 * np.sqrt((b_line**2 + (m_line * m / 2) ** 2) / (m_line**2 + 1))
        a2 = np.maximum((d_int / 2) ** 2 - (m / 2) ** 2, 0.0)
        b2 = (d_int / 2) ** 2
        x_int = -a2 * m_line * b_line / (b2 + a2 * m_line**2)
        x_int = np.where(crosses, 0.0, x_int)
        d_line = np.where(crosses, m, d_int)
        lo, hi = np.minimum(x1, x2), np.maximum(x1, x2)
        tol = 1e-12 * np.maximum(hi - lo, 1.0)
        on_seg = (x_int >= lo - tol) & (x_int <= hi + tol)
        d_general = np.where(on_seg, np.minimum(d_line, d_end), d_end)

    straddles = np.sign(y1) != np.sign(y2)
    d_vertical = np.where(straddles, 2 * np.hypot(x1, m / 2), d_end)
    d_min = np.where(vertical, d_vertical, d_general)

    up = np.array([0.0, 0.0, 1.0]) * np.asarray(height, dtype=float)[..., None]
    d_max = np.maximum(round_trip(p_l, p_f, v1 + up), round_trip(p_l, p_f, v2 + up))
    return d_min, d_max


def distance_to_bin(d, dt: float, t0: float = 0.0):
    """Zero-based histogram bin index for round-trip distance ``d``."""
    return np.floor((t0 + np.asarray(d, dtype=float) / SPEED_OF_LIGHT) / dt).astype(int)


def bin_to_distance(k, dt: float, t0: float = 0.0):
    """Round-trip distance at the start of bin ``k``."""
    return SPEED_OF_LIGHT * (np.asarray(k, dtype=float) * dt - t0)


def facet_time_bounds(p_l, p_f, vertices, dt: float, t0: float = 0.0):
    """Earliest/latest round-trip distance and bin indices for a facet.

    ``vertices`` is ``(v1, v2, v3, v4)`` with v1, v2 the bottom corners on
    the floor and v3, v4 the top corners.
    """
    p_l, p_f = as_point(p_l), as_point(p_f)
    v1, v2, v3, v4 = (as_point(v) for v in vertices)
    if abs(p_l[2]) > 1e-12 or abs(p_f[2]) > 1e-12:
        raise ValueError("laser spot and pixel must lie on the floor")
    if abs(v1[2]) > 1e-12 or abs(v2[2]) > 1e-12:
        raise ValueError("only facets resting on the floor are supported")
    if np.linalg.norm(v2 - v1) <= 1e-12:
        raise DegenerateFacet("bottom vertices coincide")
    height = 0.5 * (v3[2] + v4[2])
    d_min, _ = round_trip_bounds(p_l, p_f, v1, v2, height)
    d_max = max(round_trip(p_l, p_f, v3), round_trip(p_l, p_f, v4))
    d_min = float(d_min)
    return d_min, float(d_max), int(distance_to_bin(d_min, dt, t0)), int(distance_to_bin(d_max, dt, t0))


def project_occluded_vertices(fg_vertices, occluder_point, background_plane: PlaneSpec) -> np.ndarray:
    """Centrally project facet vertices from ``occluder_point`` onto a plane.

    Returns a ``(4, 3)`` array of shadow vertices on ``background_plane``.
    """
    o = as_point(occluder_point)
    n = background_plane.normal
    rhs = float(n @ (background_plane.point - o))
    out = []
    for v in np.asarray(fg_vertices, dtype=float):
        v = v - o
        alpha = np.arctan2(v[1], v[0])
        delta = np.arccos(np.clip(v[2] / np.linalg.norm(v), -1.0, 1.0))
        ray = np.array([np.cos(alpha) * np.sin(delta), np.sin(alpha) * np.sin(delta), np.cos(delta)])
        denom = float(n @ ray)
        if abs(denom) < 1e-12:
            raise RayParallelToPlane("occluder ray is parallel to the background plane")
        r = rhs / denom
        if r <= 0:
            raise ValueError("background plane lies behind the occluder point")
        out.append(o + r * ray)
    return np.array(out)
