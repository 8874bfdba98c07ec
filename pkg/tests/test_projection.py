import math

import numpy as np
import pytest

from prefield.projection import AUTHALIC_RADIUS, K0, LatitudeRangeError, UTMScaled, project_utm_scaled

KR = K0 * AUTHALIC_RADIUS


def test_central_meridian():
    assert UTMScaled(1, 1.0).central_meridian == -177.0
    assert UTMScaled(31, 1.0).central_meridian == 3.0
    assert UTMScaled(60, 1.0).central_meridian == 177.0


def test_origin_and_central_meridian_arc():
    p = UTMScaled(43, 1.0)
    e, n = p.forward(75.0, 0.0)
    assert (e, n) == (pytest.approx(500000.0), pytest.approx(0.0, abs=1e-9))
    # along the central meridian northing is k0 R times latitude in radians
    e, n = p.forward(75.0, 30.0)
    assert e == pytest.approx(500000.0)
    assert n == pytest.approx(KR * math.radians(30.0), rel=1e-14)


def test_equator_easting_closed_form():
    p = UTMScaled(43, 1.0)
    e, n = p.forward(78.0, 0.0)
    assert e - 500000.0 == pytest.approx(KR * math.atanh(math.sin(math.radians(3.0))), rel=1e-13)
    assert n == pytest.approx(0.0, abs=1e-9)


def test_point_scale_factor():
    # conformal: the local scale is k0 / sqrt(1 - B^2) in every direction
    p = UTMScaled(10, 1.0)
    lon, lat = -120.0, 40.0
    d = 1e-6
    e0, n0 = p.forward(lon, lat)
    e1, n1 = p.forward(lon, lat + d)
    e2, n2 = p.forward(lon + d, lat)
    R = AUTHALIC_RADIUS
    k_north = math.hypot(e1 - e0, n1 - n0) / (R * math.radians(d))
    k_east = math.hypot(e2 - e0, n2 - n0) / (R * math.cos(math.radians(lat)) * math.radians(d))
    B = math.cos(math.radians(lat)) * math.sin(math.radians(lon + 123.0))
    assert k_north == pytest.approx(K0 / math.sqrt(1 - B * B), rel=1e-6)
    assert k_east == pytest.approx(k_north, rel=1e-6)


def test_scale_and_false_northing():
    a = UTMScaled(20, 1.0).forward(-60.5, -10.0)
    b = UTMScaled(20, 1e-3, 1e7).forward(-60.5, -10.0)
    assert b[0] == pytest.approx(a[0] * 1e-3)
    assert b[1] == pytest.approx((a[1] + 1e7) * 1e-3)


def test_round_trip():
    p = UTMScaled(33, 1e-3, 1e7)
    rng = np.random.default_rng(0)
    lon = 15.0 + rng.uniform(-3, 3, 100)
    lat = rng.uniform(-79, 83, 100)
    lo, la = p.inverse(*p.forward(lon, lat))
    np.testing.assert_allclose(lo, lon, atol=1e-9)
    np.testing.assert_allclose(la, lat, atol=1e-9)


def test_latitude_band_enforced():
    with pytest.raises(LatitudeRangeError) as exc:
        UTMScaled(1, 1.0).forward([0.0, 0.0, 0.0], [10.0, 85.0, -81.0])
    assert exc.value.rows == [1, 2]


def test_bad_zone_and_scale():
    with pytest.raises(ValueError):
        UTMScaled(0, 1.0)
    with pytest.raises(ValueError):
        UTMScaled(61, 1.0)
    with pytest.raises(ValueError):
        UTMScaled(5, 0.0)


def test_wrapper_shape():
    out = project_utm_scaled([1.0, 2.0], [3.0, 4.0], 31, 1.0)
    assert out.shape == (2, 2)
