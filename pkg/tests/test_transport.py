import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cornercam.cli import fidelity_sensor, fidelity_suites
from cornercam.errors import ResolutionTooCoarse
from cornercam.geometry import facet_time_bounds
from cornercam.transport import (
    FacetParams,
    Panel,
    QuadratureSettings,
    SensorConfig,
    annulus_area,
    brdf_G,
    facet_response_fast,
    facet_response_oracle,
    fast_rates,
    oracle_rates,
    relative_l1,
)

UP = np.array([0.0, 0.0, 1.0])


@pytest.fixture(scope="module")
def sensor():
    return SensorConfig.grid((0.06, 0.0), (0.0, -0.125), 0.25, 6, bin_width=390e-12, n_bins=80)


@pytest.fixture(scope="module")
def facet():
    return FacetParams(1.45, 1.65, 1.0, 1.25, 1.1)


# ------------------------------------------------------------ BRDF


def test_brdf_aligned_is_one():
    # laser and pixel coincide below the surface point, surface faces straight down
    p_s, p = np.array([0, 0, 1.0]), np.zeros(3)
    assert brdf_G(p_s, p, p, UP, -UP, UP) == pytest.approx(1.0)


def test_brdf_grazing_is_zero():
    p_s = np.array([1.0, 0, 0.0])
    assert brdf_G(p_s, np.zeros(3), np.array([0, 0.5, 0.0]), UP, np.array([0, 0, -1.0]), UP) == 0.0


def test_brdf_matches_hand_cosines():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p_l = np.r_[rng.uniform(-0.3, 0.3, 2), 0]
        p_f = np.r_[rng.uniform(-0.3, 0.3, 2), 0]
        p_s = np.array([rng.uniform(-1, 1), rng.uniform(1, 2), rng.uniform(0, 2)])
        n_s = np.array([rng.uniform(-0.3, 0.3), -1.0, 0.0])
        n_s /= np.linalg.norm(n_s)
        u1 = (p_s - p_l) / np.linalg.norm(p_s - p_l)
        u2 = (p_f - p_s) / np.linalg.norm(p_f - p_s)
        cos = [u1 @ UP, -u1 @ n_s, u2 @ n_s, -u2 @ UP]
        expected = math.prod(max(c, 0.0) for c in cos)
        assert brdf_G(p_s, p_l, p_f, UP, n_s, UP) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------ annulus


@pytest.mark.parametrize(
    "args, expected",
    [((0, 2 * math.pi, 0, 1.3), math.pi * 1.3**2), ((0, math.pi, 1, 1), 0.0), ((0, math.pi / 2, 1, 2), 3 * math.pi / 4)],
)
def test_annulus_area(args, expected):
    assert annulus_area(*args) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------ fast model


def test_zero_albedo_gives_zero_cube(sensor, facet):
    dark = FacetParams(facet.theta_min, facet.theta_max, 0.0, facet.range, facet.height)
    assert not np.any(facet_response_fast(dark, sensor).values)
    assert not np.any(facet_response_oracle(dark, sensor, QuadratureSettings(oracle_resolution=50)).values)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 5.0))
def test_fast_model_is_linear_in_albedo(a):
    sensor = SensorConfig.grid((0.06, 0.0), (0.0, -0.125), 0.25, 4, bin_width=390e-12, n_bins=80)
    base = fast_rates(FacetParams(1.4, 1.7, 1.0, 1.3, 1.2), sensor)
    scaled = fast_rates(FacetParams(1.4, 1.7, a, 1.3, 1.2), sensor)
    assert np.allclose(scaled, a * base, rtol=1e-12, atol=0)


def test_fast_support_within_time_bounds(sensor):
    for facet in [FacetParams(1.45, 1.65, 1.0, 1.25, 1.1), FacetParams(0.3, 1.2, 1.0, 0.8, 2.0)]:
        panel = facet.to_panel(sensor.edge)
        rates = fast_rates(facet, sensor)
        for n, p_f in enumerate(sensor.pixels):
            _, _, k_lo, k_hi = facet_time_bounds(sensor.laser, p_f, panel.vertices(), sensor.bin_width)
            nz = np.flatnonzero(rates[n])
            if nz.size:
                assert nz.min() >= k_lo and nz.max() <= k_hi


def test_pixels_below_facet_azimuth_see_nothing(sensor):
    gam = sensor.pixel_azimuths
    theta_min = float(np.median(gam))
    facet = FacetParams(theta_min, min(theta_min + 0.4, math.pi), 1.0, 1.2, 1.0)
    rates = fast_rates(facet, sensor)
    hidden = gam < theta_min
    assert hidden.any() and (~hidden).any()
    assert not np.any(rates[hidden])
    assert np.all(rates[~hidden].sum(axis=1) > 0)


def test_reciprocity_under_laser_pixel_swap():
    a, b = np.array([0.06, 0.0, 0.0]), np.array([0.02, -0.3, 0.0])
    facet = FacetParams(0.4, 0.8, 1.0, 1.3, 1.2)  # fully visible from both points
    s_ab = SensorConfig(laser=a, pixels=b[None], pixel_area=1e-4, bin_width=390e-12, n_bins=80)
    s_ba = SensorConfig(laser=b, pixels=a[None], pixel_area=1e-4, bin_width=390e-12, n_bins=80)
    for fn in (fast_rates, lambda f, s: oracle_rates(f, s, QuadratureSettings(oracle_resolution=200))):
        assert np.allclose(fn(facet, s_ab), fn(facet, s_ba), rtol=1e-10, atol=0)


def test_fast_model_close_to_oracle(sensor, facet):
    exact = oracle_rates(facet, sensor)
    assert relative_l1(exact, fast_rates(facet, sensor)) < 0.05


def test_person_facet_fidelity_single_rotation():
    rot, panel = fidelity_suites()["person"][1]
    sensor = fidelity_sensor()
    assert relative_l1(oracle_rates(panel, sensor), fast_rates(panel, sensor)) <= 0.05


def test_fast_rates_accept_panels_and_facets_alike(sensor, facet):
    assert np.array_equal(fast_rates(facet, sensor), fast_rates(facet.to_panel(sensor.edge), sensor))


# ------------------------------------------------------------ oracle


def test_oracle_doubling_albedo_doubles_entries(sensor, facet):
    q = QuadratureSettings(oracle_resolution=60)
    one = oracle_rates(facet, sensor, q)
    two = oracle_rates(FacetParams(facet.theta_min, facet.theta_max, 2.0, facet.range, facet.height), sensor, q)
    assert np.allclose(two, 2 * one, rtol=1e-12, atol=0)


def test_oracle_halving_bin_width_preserves_totals(facet):
    coarse = SensorConfig.grid((0.06, 0.0), (0.0, -0.125), 0.25, 4, bin_width=390e-12, n_bins=80)
    fine = SensorConfig.grid((0.06, 0.0), (0.0, -0.125), 0.25, 4, bin_width=195e-12, n_bins=160)
    q = QuadratureSettings(oracle_resolution=100)
    a = oracle_rates(facet, coarse, q).sum(axis=1)
    b = oracle_rates(facet, fine, q).sum(axis=1)
    assert np.allclose(a, b, rtol=1e-6, atol=0)


def test_oracle_converges_with_resolution():
    _, panel = fidelity_suites()["person"][0]
    sensor = fidelity_sensor(n_side=4)
    lo = oracle_rates(panel, sensor, QuadratureSettings(oracle_resolution=125)).sum()
    hi = oracle_rates(panel, sensor, QuadratureSettings(oracle_resolution=250)).sum()
    assert abs(hi - lo) / hi < 0.005


def test_oracle_threads_do_not_change_result(sensor, facet):
    q = QuadratureSettings(oracle_resolution=80)
    assert np.array_equal(oracle_rates(facet, sensor, q, workers=1), oracle_rates(facet, sensor, q, workers=3))


def test_too_coarse_oracle_raises(sensor):
    tiny = Panel([0.0, 1.0], [0.01, 1.0], 0.01)
    with pytest.raises(ResolutionTooCoarse):
        oracle_rates(tiny, sensor, QuadratureSettings(oracle_resolution=50))


def test_settings_validation():
    with pytest.raises(ValueError):
        QuadratureSettings(d_max_annulus=0)
    with pytest.raises(ValueError):
        QuadratureSettings(oracle_resolution=1)
