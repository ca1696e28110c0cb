"""Featurization tests: Fourier embeddings, spherical harmonics, haversine."""

import numpy as np
import pytest

from gridtnp.geomembed import (
    DomainError,
    FourierEmbedConfig,
    SphericalEmbedConfig,
    fourier_embed,
    haversine,
    spherical_embed,
)
from gridtnp.tensor import NumericError


class TestFourier:
    def test_zero_time_gives_unit_cosines(self):
        cfg = FourierEmbedConfig(10, 1.0, 8760.0)
        out = fourier_embed(0.0, cfg)
        np.testing.assert_array_equal(out[0::2], np.ones(5))
        np.testing.assert_array_equal(out[1::2], np.zeros(5))

    def test_half_period_pairs(self):
        cfg = FourierEmbedConfig(8, 0.5, 100.0)
        lam = cfg.wavelengths()
        for i in range(len(lam)):
            out = fourier_embed(lam[i] / 2.0, cfg)
            np.testing.assert_allclose(out[2 * i], -1.0, atol=1e-12)
            np.testing.assert_allclose(out[2 * i + 1], 0.0, atol=1e-9)

    def test_paper_hourly_config_against_direct_evaluation(self, rng):
        # L=10 with wavelengths from 1 hour to the hours in a year
        cfg = FourierEmbedConfig(10, 1.0, 8760.0)
        lam = cfg.wavelengths()
        np.testing.assert_allclose(lam, np.logspace(0.0, np.log10(8760.0), 5), rtol=1e-12)
        t = rng.uniform(0, 20000, size=50)
        out = fourier_embed(t, cfg)
        for i, l in enumerate(lam):
            np.testing.assert_allclose(out[:, 2 * i], np.cos(2 * np.pi * t / l), atol=1e-12)
            np.testing.assert_allclose(out[:, 2 * i + 1], np.sin(2 * np.pi * t / l), atol=1e-12)

    def test_pairs_lie_on_unit_circle(self, rng):
        cfg = FourierEmbedConfig(16, 0.01, 12.0)
        out = fourier_embed(rng.uniform(-50, 50, size=200), cfg)
        np.testing.assert_allclose(out[:, 0::2] ** 2 + out[:, 1::2] ** 2, 1.0, atol=1e-12)

    def test_width_and_validation(self):
        assert FourierEmbedConfig(10, 1.0, 10.0).width == 10
        assert FourierEmbedConfig(9, 1.0, 10.0).width == 8
        with pytest.raises(ValueError):
            FourierEmbedConfig(10, 5.0, 1.0)
        with pytest.raises(NumericError):
            fourier_embed(np.nan, FourierEmbedConfig(4, 1.0, 2.0))


def low_degree_table(lat, lon):
    """Closed-form real orthonormal spherical harmonics up to degree 4.

    Cartesian forms from the standard real-harmonic table, evaluated on the
    unit sphere; used as an independent oracle for the recurrence.
    """
    theta = np.deg2rad(90.0 - lat)
    phi = np.deg2rad(lon)
    x = np.sin(theta) * np.cos(phi)
    y = np.sin(theta) * np.sin(phi)
    z = np.cos(theta)
    pi = np.pi
    vals = {
        (0, 0): 0.5 * np.sqrt(1 / pi),
        (1, -1): np.sqrt(3 / (4 * pi)) * y,
        (1, 0): np.sqrt(3 / (4 * pi)) * z,
        (1, 1): np.sqrt(3 / (4 * pi)) * x,
        (2, -2): 0.5 * np.sqrt(15 / pi) * x * y,
        (2, -1): 0.5 * np.sqrt(15 / pi) * y * z,
        (2, 0): 0.25 * np.sqrt(5 / pi) * (3 * z**2 - 1),
        (2, 1): 0.5 * np.sqrt(15 / pi) * x * z,
        (2, 2): 0.25 * np.sqrt(15 / pi) * (x**2 - y**2),
        (3, -3): 0.25 * np.sqrt(35 / (2 * pi)) * y * (3 * x**2 - y**2),
        (3, -2): 0.5 * np.sqrt(105 / pi) * x * y * z,
        (3, -1): 0.25 * np.sqrt(21 / (2 * pi)) * y * (5 * z**2 - 1),
        (3, 0): 0.25 * np.sqrt(7 / pi) * (5 * z**3 - 3 * z),
        (3, 1): 0.25 * np.sqrt(21 / (2 * pi)) * x * (5 * z**2 - 1),
        (3, 2): 0.25 * np.sqrt(105 / pi) * (x**2 - y**2) * z,
        (3, 3): 0.25 * np.sqrt(35 / (2 * pi)) * x * (x**2 - 3 * y**2),
        (4, -4): 0.75 * np.sqrt(35 / pi) * x * y * (x**2 - y**2),
        (4, -3): 0.75 * np.sqrt(35 / (2 * pi)) * y * z * (3 * x**2 - y**2),
        (4, -2): 0.75 * np.sqrt(5 / pi) * x * y * (7 * z**2 - 1),
        (4, -1): 0.75 * np.sqrt(5 / (2 * pi)) * y * (7 * z**3 - 3 * z),
        (4, 0): (3.0 / 16.0) * np.sqrt(1 / pi) * (35 * z**4 - 30 * z**2 + 3),
        (4, 1): 0.75 * np.sqrt(5 / (2 * pi)) * x * (7 * z**3 - 3 * z),
        (4, 2): 0.75 * np.sqrt(5 / pi) * (x**2 - y**2) * (7 * z**2 - 1) / 2.0,
        (4, 3): 0.75 * np.sqrt(35 / (2 * pi)) * x * z * (x**2 - 3 * y**2),
        (4, 4): (3.0 / 16.0) * np.sqrt(35 / pi) * (x**2 * (x**2 - 3 * y**2) - y**2 * (3 * x**2 - y**2)),
    }
    return vals


class TestSpherical:
    def test_degree_zero_is_constant(self, rng):
        cfg = SphericalEmbedConfig(3)
        const = 0.5 * np.sqrt(1 / np.pi)
        for _ in range(10):
            lat = rng.uniform(-90, 90)
            lon = rng.uniform(-180, 180)
            np.testing.assert_allclose(spherical_embed(lat, lon, cfg)[0], const, atol=1e-14)

    def test_longitude_period(self, rng):
        cfg = SphericalEmbedConfig(6)
        lat = rng.uniform(-90, 90, size=20)
        lon = rng.uniform(-180, 180, size=20)
        a = spherical_embed(lat, lon, cfg)
        b = spherical_embed(lat, lon + 360.0, cfg)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_low_degree_closed_form_oracle(self, rng):
        cfg = SphericalEmbedConfig(5)
        for _ in range(30):
            lat = rng.uniform(-90, 90)
            lon = rng.uniform(-180, 180)
            emb = spherical_embed(lat, lon, cfg)
            for (l, m), want in low_degree_table(lat, lon).items():
                got = emb[l * l + l + m]
                assert abs(got - want) < 1e-9, (l, m, got, want)

    def test_poles_are_longitude_independent(self, rng):
        cfg = SphericalEmbedConfig(10)
        for lat in (90.0, -90.0):
            ref = spherical_embed(lat, 0.0, cfg)
            for lon in rng.uniform(-180, 180, size=10):
                np.testing.assert_allclose(spherical_embed(lat, lon, cfg), ref, atol=1e-12)

    def test_width_and_domain(self):
        assert SphericalEmbedConfig(10).width == 100
        assert spherical_embed(10.0, 20.0, SphericalEmbedConfig(10)).shape == (100,)
        with pytest.raises(DomainError):
            spherical_embed(91.0, 0.0, SphericalEmbedConfig(2))


class TestHaversine:
    def test_zero_distance(self):
        assert haversine([12.3, 45.6], [12.3, 45.6]) == 0.0

    def test_equator_quarter_turn(self):
        np.testing.assert_allclose(haversine([0.0, 0.0], [0.0, 90.0]), np.pi / 2, atol=1e-12)

    def test_antipodal_on_equator(self):
        np.testing.assert_allclose(haversine([0.0, 0.0], [0.0, 180.0]), np.pi, atol=1e-12)

    def test_symmetry_and_triangle_inequality(self, rng):
        pts = np.stack(
            [rng.uniform(-90, 90, size=(1000, 3)), rng.uniform(-180, 180, size=(1000, 3))],
            axis=-1,
        )  # (1000, 3, 2)
        a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
        dab, dba = haversine(a, b), haversine(b, a)
        np.testing.assert_allclose(dab, dba, atol=1e-15)
        dac, dcb = haversine(a, c), haversine(c, b)
        assert (dab <= dac + dcb + 1e-9).all()

    def test_latitude_domain(self):
        with pytest.raises(DomainError):
            haversine([95.0, 0.0], [0.0, 0.0])
