"""Scaled transverse Mercator (UTM-zone) projection on a sphere.

The sphere has the authalic radius of WGS84.  Coordinates are projected with
the usual UTM zone conventions (central meridian ``6 * zone - 183`` degrees,
scale 0.9996, false easting 500 km) and then multiplied by ``scale`` so that
tracks live in the model's abstract distance units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AUTHALIC_RADIUS = 6371007.181  # metres
K0 = 0.9996
FALSE_EASTING = 500000.0
LAT_RANGE = (-80.0, 84.0)


class LatitudeRangeError(ValueError):
    """Latitude outside the band where UTM is defined."""

    def __init__(self, bad_rows, lats):
        self.rows = list(bad_rows)
        shown = ", ".join(f"#{r} ({lat:g})" for r, lat in zip(self.rows[:10], lats[:10]))
        more = "" if len(self.rows) <= 10 else f" and {len(self.rows) - 10} more"
        super().__init__(
            f"latitude outside [{LAT_RANGE[0]:g}, {LAT_RANGE[1]:g}] for record(s) {shown}{more}"
        )


@dataclass(frozen=True)
class UTMScaled:
    """Forward/inverse projection for one zone.

    Parameters
    ----------
    zone : int
        UTM zone, 1..60.
    scale : float
        Multiplier applied to easting/northing in metres.
    false_northing : float
        Added to northings (metres, before scaling); UTM uses 1e7 in the
        southern hemisphere.
    """

    zone: int
    scale: float
    false_northing: float = 0.0

    def __post_init__(self):
        if not 1 <= int(self.zone) <= 60:
            raise ValueError(f"UTM zone must be in 1..60, got {self.zone}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def central_meridian(self) -> float:
        return 6.0 * int(self.zone) - 183.0

    def forward(self, lon, lat):
        """Degrees to scaled easting/northing; ``lat`` must lie in the UTM band."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        bad = np.flatnonzero(~((lat >= LAT_RANGE[0]) & (lat <= LAT_RANGE[1])))
        if bad.size:
            raise LatitudeRangeError(bad, np.ravel(lat)[bad])
        phi = np.radians(lat)
        dlam = np.radians(lon - self.central_meridian)
        dlam = (dlam + np.pi) % (2 * np.pi) - np.pi
        B = np.cos(phi) * np.sin(dlam)
        kR = K0 * AUTHALIC_RADIUS
        x = 0.5 * kR * np.log((1.0 + B) / (1.0 - B))
        y = kR * np.arctan2(np.tan(phi), np.cos(dlam))
        east = (x + FALSE_EASTING) * self.scale
        north = (y + self.false_northing) * self.scale
        return east, north

    def inverse(self, east, north):
        kR = K0 * AUTHALIC_RADIUS
        x = np.asarray(east, dtype=float) / self.scale - FALSE_EASTING
        y = np.asarray(north, dtype=float) / self.scale - self.false_northing
        D = y / kR
        xs = x / kR
        lat = np.degrees(np.arcsin(np.sin(D) / np.cosh(xs)))
        lon = self.central_meridian + np.degrees(np.arctan2(np.sinh(xs), np.cos(D)))
        return lon, lat


def project_utm_scaled(lon, lat, zone: int, scale: float, false_northing: float = 0.0):
    """Convenience wrapper returning an ``(n, 2)`` array of projected points."""
    e, n = UTMScaled(zone, scale, false_northing).forward(lon, lat)
    return np.column_stack([np.ravel(e), np.ravel(n)])
