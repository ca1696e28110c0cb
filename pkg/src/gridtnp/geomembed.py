"""Input featurization: Fourier embeddings, real spherical harmonics, and
great-circle distance.

These are pure functions of raw input coordinates (no learned parameters),
so they operate on plain numpy arrays; gradients never flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NumericError

__all__ = [
    "DomainError",
    "FourierEmbedConfig",
    "SphericalEmbedConfig",
    "fourier_embed",
    "spherical_embed",
    "haversine",
]


class DomainError(ValueError):
    """Input coordinates fall outside the valid domain."""


@dataclass(frozen=True)
class FourierEmbedConfig:
    """Log-spaced cosine/sine features for a scalar input.

    ``num_wavelengths`` is the output width; ``num_wavelengths // 2``
    wavelengths are placed log-uniformly between ``lambda_min`` and
    ``lambda_max``, each contributing a (cos, sin) pair.
    """

    num_wavelengths: int
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        if self.num_wavelengths < 2:
            raise ValueError("num_wavelengths must be at least 2")
        if not (0 < self.lambda_min < self.lambda_max):
            raise ValueError("need 0 < lambda_min < lambda_max")

    @property
    def width(self) -> int:
        return 2 * (self.num_wavelengths // 2)

    def wavelengths(self) -> np.ndarray:
        n = self.num_wavelengths // 2
        return np.logspace(np.log10(self.lambda_min), np.log10(self.lambda_max), n)


def fourier_embed(t, cfg: FourierEmbedConfig) -> np.ndarray:
    """Embed scalar(s) ``t`` as interleaved (cos 2πt/λᵢ, sin 2πt/λᵢ) pairs.

    Output shape is ``t.shape + (cfg.width,)``; pair ``i`` sits at columns
    ``2i`` and ``2i + 1``.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise NumericError("fourier_embed: non-finite input value")
    lam = cfg.wavelengths()
    ang = 2.0 * np.pi * t[..., None] / lam
    out = np.empty(t.shape + (cfg.width,), dtype=np.float64)
    out[..., 0::2] = np.cos(ang)
    out[..., 1::2] = np.sin(ang)
    return out


@dataclass(frozen=True)
class SphericalEmbedConfig:
    """Real spherical-harmonic features up to degree ``num_legendre - 1``.

    Output width is ``num_legendre ** 2``.
    """

    num_legendre: int

    def __post_init__(self):
        if self.num_legendre < 1:
            raise ValueError("num_legendre must be positive")

    @property
    def width(self) -> int:
        return self.num_legendre**2


def _normalized_legendre(x: np.ndarray, sin_theta: np.ndarray, n: int) -> np.ndarray:
    """Fully normalized associated Legendre values Q_l^m(x) for 0 <= m <= l < n.

    Q_l^m = sqrt((2l+1)/(4π) (l-m)!/(l+m)!) P_l^m with the Condon-Shortley
    phase omitted, evaluated by the standard stable three-term recurrences
    (no factorials formed). Returned as an array of shape x.shape + (n, n)
    indexed [l, m]; entries with m > l are zero.
    """
    q = np.zeros(x.shape + (n, n), dtype=np.float64)
    q[..., 0, 0] = np.sqrt(1.0 / (4.0 * np.pi))
    for m in range(1, n):
        q[..., m, m] = q[..., m - 1, m - 1] * sin_theta * np.sqrt((2 * m + 1) / (2.0 * m))
    for m in range(0, n - 1):
        q[..., m + 1, m] = q[..., m, m] * x * np.sqrt(2 * m + 3.0)
    for m in range(0, n):
        for l in range(m + 2, n):
            a = np.sqrt((2 * l + 1.0) * (2 * l - 1.0) / ((l - m) * (l + m)))
            b = np.sqrt(
                (2 * l + 1.0) * (l - 1 - m) * (l - 1 + m) / ((2 * l - 3.0) * (l - m) * (l + m))
            )
            q[..., l, m] = a * x * q[..., l - 1, m] - b * q[..., l - 2, m]
    return q


def canonical_lon(lon) -> np.ndarray:
    """Wrap longitudes into [-180, 180)."""
    lon = np.asarray(lon, dtype=np.float64)
    return np.mod(lon + 180.0, 360.0) - 180.0


def spherical_embed(lat, lon, cfg: SphericalEmbedConfig) -> np.ndarray:
    """Real orthonormal spherical-harmonic basis values at (lat, lon) degrees.

    Longitudes are canonicalized to [-180, 180) first; latitudes must lie in
    [-90, 90]. Features are ordered by degree l then order m from -l to l,
    i.e. feature index l² + l + m; output shape is ``lat.shape + (l_max²,)``.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise NumericError("spherical_embed: non-finite coordinate")
    if np.any(lat < -90.0) or np.any(lat > 90.0):
        raise DomainError("spherical_embed: latitude outside [-90, 90]")
    lon = canonical_lon(lon)
    lat, lon = np.broadcast_arrays(lat, lon)

    n = cfg.num_legendre
    phi = np.deg2rad(lon)
    # colatitude: x = cos(theta) = sin(lat)
    x = np.sin(np.deg2rad(lat))
    sin_theta = np.cos(np.deg2rad(lat))
    q = _normalized_legendre(x, sin_theta, n)

    out = np.empty(lat.shape + (n * n,), dtype=np.float64)
    sqrt2 = np.sqrt(2.0)
    for l in range(n):
        base = l * l + l
        out[..., base] = q[..., l, 0]
        for m in range(1, l + 1):
            out[..., base + m] = sqrt2 * q[..., l, m] * np.cos(m * phi)
            out[..., base - m] = sqrt2 * q[..., l, m] * np.sin(m * phi)
    return out


def haversine(p1, p2) -> np.ndarray:
    """Great-circle distance between (lat, lon) points in degrees.

    Returns radians on the unit sphere (radius 1). Accepts arrays whose last
    axis holds (lat, lon); broadcasting applies to the leading axes.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    lat1, lon1 = np.deg2rad(p1[..., 0]), np.deg2rad(p1[..., 1])
    lat2, lon2 = np.deg2rad(p2[..., 0]), np.deg2rad(p2[..., 1])
    if not (np.all(np.isfinite(lat1)) and np.all(np.isfinite(lat2))):
        raise NumericError("haversine: non-finite coordinate")
    if np.any(np.abs(p1[..., 0]) > 90.0) or np.any(np.abs(p2[..., 0]) > 90.0):
        raise DomainError("haversine: latitude outside [-90, 90]")
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    inner = (1.0 - np.cos(dlat) + np.cos(lat1) * np.cos(lat2) * (1.0 - np.cos(dlon))) / 2.0
    inner = np.clip(inner, 0.0, 1.0)
    return 2.0 * np.arcsin(np.sqrt(inner))
