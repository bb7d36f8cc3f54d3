import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_extrema, facet_vertices, linear_ray_plane, radial_hausdorff, random_case

from cornercam.errors import DegenerateFacet, DegenerateIntersection, NoIntersection, RayParallelToPlane
from cornercam.geometry import (
    EdgeSpec,
    EllipsoidSpec,
    PlaneSpec,
    ellipse_radius,
    ellipsoid_plane_intersection,
    facet_time_bounds,
    project_occluded_vertices,
    round_trip,
    visibility,
)


# ------------------------------------------------------------ intersection


def test_ground_plane_semi_axes():
    e = EllipsoidSpec(m=1.0, d=2.0)
    ell = ellipsoid_plane_intersection(e, PlaneSpec([0, 0, 1], [0, 0, 0]))
    assert sorted([ell.A, ell.B]) == pytest.approx([math.sqrt(0.75), 1.0], abs=1e-12)


def test_vertical_plane_boundary_has_round_trip_d():
    e = EllipsoidSpec.from_foci([0.06, 0, 0], [0.1, -0.2, 0], 3.0)
    ell = ellipsoid_plane_intersection(e, PlaneSpec([0.3, 1, 0], [0.2, 0.9, 0.4]))
    pts = ell.boundary(np.linspace(0, 2 * np.pi, 400))
    f1, f2 = e.foci
    assert np.allclose(round_trip(f1, f2, pts), 3.0, rtol=1e-9, atol=0)


def test_intersection_matches_traced_curve_on_random_cases():
    rng = np.random.default_rng(11)
    worst = max(radial_hausdorff(*c, ellipsoid_plane_intersection(*c), n=90) for c in (random_case(rng) for _ in range(20)))
    assert worst < 1e-6


def test_plane_missing_ellipsoid_raises():
    e = EllipsoidSpec(m=1.0, d=2.0)
    with pytest.raises(NoIntersection):
        ellipsoid_plane_intersection(e, PlaneSpec([0, 0, 1], [0, 0, 5.0]))


def test_tangent_plane_raises():
    e = EllipsoidSpec(m=1.0, d=2.0)
    with pytest.raises(DegenerateIntersection):
        ellipsoid_plane_intersection(e, PlaneSpec([0, 1, 0], [0, 1.0, 0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(0.01, 3.0), st.floats(0.0, 0.5))
def test_semi_axes_grow_with_round_trip(m, extra, offset):
    plane = PlaneSpec([1, 0.2, 0], [offset, 0, 0.1])
    prev = (0.0, 0.0)
    for d in m + extra + np.linspace(1.0, 3.0, 6):
        ell = ellipsoid_plane_intersection(EllipsoidSpec(m=m, d=d), plane)
        assert ell.A >= prev[0] - 1e-12 and ell.B >= prev[1] - 1e-12
        prev = (ell.A, ell.B)


def test_ellipse_frame_is_orthonormal_and_in_plane():
    e = EllipsoidSpec.from_foci([0, 0, 0], [0.3, 0.1, 0], 2.5)
    p = PlaneSpec([0.2, 0.9, 0.1], [0.1, 0.4, 0.3])
    ell = ellipsoid_plane_intersection(e, p)
    assert ell.A > 0 and ell.B > 0
    assert abs(ell.r_axis @ ell.s_axis) < 1e-12
    assert abs(ell.r_axis @ p.normal) < 1e-12 and abs(ell.s_axis @ p.normal) < 1e-12


# ------------------------------------------------------------ radius


@pytest.mark.parametrize(
    "theta, A, B, expected",
    [(0.7, 1.0, 1.0, 1.0), (0.0, 2.0, 1.0, 2.0), (math.pi / 2, 2.0, 1.0, 1.0)],
)
def test_ellipse_radius_examples(theta, A, B, expected):
    assert ellipse_radius(theta, A, B) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------ visibility


def test_visibility_boundary_is_visible():
    edge = EdgeSpec()
    alpha = 0.9
    p_s = 2.0 * edge.direction(alpha)
    # floor point at the same azimuth on the visible side
    p_f = -1.0 * edge.direction(alpha)
    assert edge.floor_azimuth(p_f) == pytest.approx(alpha, abs=1e-12)
    assert visibility(p_s, p_f, edge) == 1


def test_visibility_branches():
    edge = EdgeSpec()
    p_s = 2.0 * edge.direction(1.0)
    assert visibility(p_s, -edge.direction(0.8), edge) == 0
    assert visibility(p_s, -edge.direction(1.2), edge) == 1


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, math.pi), st.floats(0.0, math.pi), st.floats(0.0, math.pi))
def test_visibility_monotone_in_floor_azimuth(alpha, g1, g2):
    edge = EdgeSpec()
    g1, g2 = sorted((g1, g2))
    p_s = 1.5 * edge.direction(alpha)
    assert visibility(p_s, -edge.direction(g1), edge) <= visibility(p_s, -edge.direction(g2), edge)


# ------------------------------------------------------------ facet bounds


def test_bounds_for_horizontal_bottom_line():
    # foci on the y-axis at -+m/2 and a bottom edge along y = b (frame with foci on y)
    m, b = 0.4, 1.1
    p_l, p_f = np.array([0, -m / 2, 0]), np.array([0, m / 2, 0])
    verts = facet_vertices([-0.5, b], [0.5, b], 1.0)
    d_min, _, _, _ = facet_time_bounds(p_l, p_f, verts, 1e-10)
    assert d_min == pytest.approx(2 * b, abs=1e-12)


def test_bounds_for_bottom_edge_straddling_the_foci_axis():
    # foci on the y-axis; bottom edge parallel to it and crossing y = 0
    p_l, p_f = np.array([0, -0.3, 0]), np.array([0, 0.3, 0])
    verts = facet_vertices([1.2, -0.8], [1.2, 0.5], 1.0)
    d_min, _, _, _ = facet_time_bounds(p_l, p_f, verts, 1e-10)
    assert d_min == pytest.approx(round_trip(p_l, p_f, np.array([1.2, 0.0, 0.0])), abs=1e-12)


def test_bounds_agree_with_dense_sampling():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(25):
        p_l = np.r_[rng.uniform(-0.5, 0.5, 2), 0]
        p_f = np.r_[rng.uniform(-0.5, 0.5, 2), 0]
        c = rng.uniform(-2, 2, 2) + np.array([0, 2.5])
        phi = rng.uniform(0, np.pi)
        half = rng.uniform(0.1, 0.5) * np.array([math.cos(phi), math.sin(phi)])
        verts = facet_vertices(c - half, c + half, rng.uniform(0.3, 2.5))
        d_min, d_max, k_min, k_max = facet_time_bounds(p_l, p_f, verts, 390e-12)
        lo, hi = dense_extrema(p_l, p_f, verts)
        worst = max(worst, abs(d_min - lo), abs(d_max - hi))
        assert k_min <= k_max
    assert worst < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(1.0, 3.0), st.floats(0.05, 1.0), st.floats(0.2, 2.0), st.floats(0, 1), st.floats(0, 1))
def test_bounds_sandwich_every_facet_point(x0, y0, w, h, u, z):
    p_l, p_f = np.array([0.06, 0, 0]), np.array([-0.1, -0.2, 0])
    verts = facet_vertices([x0, y0], [x0 + w, y0 + 0.3 * w], h)
    d_min, d_max, _, _ = facet_time_bounds(p_l, p_f, verts, 390e-12)
    p = verts[0] + u * (verts[1] - verts[0]) + np.array([0, 0, z * h])
    d = round_trip(p_l, p_f, p)
    assert d_min - 1e-9 <= d <= d_max + 1e-9


def test_degenerate_facet_raises():
    with pytest.raises(DegenerateFacet):
        facet_time_bounds([0, 0, 0], [0.1, 0, 0], facet_vertices([1, 1], [1, 1], 1.0), 1e-10)


# ------------------------------------------------------------ shadow projection


def test_projection_doubles_coordinates():
    out = project_occluded_vertices(np.array([[1, 0, 0.5]] * 4), [0, 0, 0], PlaneSpec([1, 0, 0], [2, 0, 0]))
    assert np.allclose(out[0], [2, 0, 1.0], atol=1e-12)


def test_projection_of_vertex_on_plane_is_identity():
    v = np.array([[2.0, 0.4, 0.7]] * 4)
    out = project_occluded_vertices(v, [0.06, 0, 0], PlaneSpec([1, 0.2, 0], [2.0, 0.4, 0.0]))
    assert np.allclose(out, v, atol=1e-12)


def test_projection_matches_linear_solve():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        o = np.r_[rng.uniform(-0.3, 0.3, 2), 0.0]
        verts = np.c_[rng.uniform(-0.5, 0.5, (4, 1)), rng.uniform(0.8, 1.5, (4, 1)), rng.uniform(0, 2, (4, 1))]
        phi = rng.uniform(np.pi / 3, 2 * np.pi / 3)
        normal = np.array([math.cos(phi), math.sin(phi), 0])
        plane = PlaneSpec(normal, 3.0 * normal)
        out = project_occluded_vertices(verts, o, plane)
        ref = np.array([linear_ray_plane(v, o, plane) for v in verts])
        worst = max(worst, np.abs(out - ref).max())
        # collinear with the occluder and source vertex
        for v, s in zip(verts, out):
            assert abs(np.linalg.det(np.array([o, v, s]) - np.array([[0, 0, 0], o, o]))) < 1e-9
    assert worst < 1e-9


def test_parallel_ray_raises():
    with pytest.raises(RayParallelToPlane):
        project_occluded_vertices(np.array([[0, 1, 0]] * 4), [0, 0, 0], PlaneSpec([1, 0, 0], [2, 0, 0]))
