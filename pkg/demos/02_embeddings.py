"""Input featurization: Fourier embeddings for time-like scalars, spherical
harmonics for geographic coordinates, and great-circle distances."""

import numpy as np

from gridtnp.geomembed import (
    FourierEmbedConfig,
    SphericalEmbedConfig,
    fourier_embed,
    haversine,
    spherical_embed,
)

# Hourly-scale temporal embedding: wavelengths from one hour to one year.
cfg = FourierEmbedConfig(num_wavelengths=10, lambda_min=1.0, lambda_max=8760.0)
print("wavelengths (hours):", np.round(cfg.wavelengths(), 1))
for t in (0.0, 12.0, 8760.0):
    emb = fourier_embed(t, cfg)
    print(f"Emb({t:7.1f}) = {np.round(emb, 3)}")

# Spherical-harmonic embedding of a few cities; nearby places get similar
# features, antipodal ones do not.
sph = SphericalEmbedConfig(num_legendre=6)
cities = {
    "london": (51.5, -0.1),
    "paris": (48.9, 2.4),
    "sydney": (-33.9, 151.2),
}
embs = {name: spherical_embed(lat, lon, sph) for name, (lat, lon) in cities.items()}
print(f"\nspherical features per point: {sph.width}")
for a in cities:
    for b in cities:
        if a < b:
            cos = embs[a] @ embs[b] / np.linalg.norm(embs[a]) / np.linalg.norm(embs[b])
            d = haversine(cities[a], cities[b])
            print(f"{a:7s} vs {b:7s}: great-circle {d:.3f} rad, feature cosine {cos:+.3f}")

# Longitude wraps: +180 and -180 are the same meridian.
e1 = spherical_embed(10.0, 180.0, sph)
e2 = spherical_embed(10.0, -180.0, sph)
print("\nmax |emb(lon=180) - emb(lon=-180)| =", np.abs(e1 - e2).max())
