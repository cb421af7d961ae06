"""Spherical geometry: directions, angular distance, FOA steering vectors, grids.

Angles are degrees at every public boundary. Ambisonic channels follow ACN
order (W, Y, Z, X) with SN3D normalisation, so a plane wave from direction
``u`` has the gains ``(1, u_y, u_z, u_x)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence, Tuple, overload

import numpy as np


def wrap_azimuth(az):
    """Wrap azimuth(s) in degrees to [-180, 180)."""
    wrapped = np.mod(np.asarray(az, dtype=float) + 180.0, 360.0) - 180.0
    # np.mod can return 360 - eps -> 180 for tiny negative inputs
    wrapped = np.where(wrapped >= 180.0, wrapped - 360.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Doa:
    """Direction of arrival; azimuth is stored wrapped to [-180, 180)."""

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        el = float(self.elevation_deg)
        if not np.isfinite(el) or abs(el) > 90.0:
            raise ValueError(f"elevation {self.elevation_deg} outside [-90, 90]")
        az = float(self.azimuth_deg)
        if not np.isfinite(az):
            raise ValueError(f"azimuth {self.azimuth_deg} is not finite")
        object.__setattr__(self, "azimuth_deg", wrap_azimuth(az))
        object.__setattr__(self, "elevation_deg", el)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.azimuth_deg, self.elevation_deg)


@dataclass(frozen=True)
class UnitVector:
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = np.sqrt(self.x**2 + self.y**2 + self.z**2)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"not a unit vector (norm={norm})")

    @classmethod
    def normalized(cls, x: float, y: float, z: float) -> "UnitVector":
        v = np.array([x, y, z], dtype=float)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("cannot normalise the zero vector")
        v /= n
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class SteeringVector:
    """Real FOA gains in ACN order."""

    w: float
    y: float
    z: float
    x: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.y, self.z, self.x])


def unit_vectors(az_deg, el_deg) -> np.ndarray:
    """Vectorised direction cosines, shape ``(..., 3)`` as (x, y, z)."""
    az = np.deg2rad(np.asarray(az_deg, dtype=float))
    el = np.deg2rad(np.asarray(el_deg, dtype=float))
    cos_el = np.cos(el)
    return np.stack([cos_el * np.cos(az), cos_el * np.sin(az), np.sin(el)], axis=-1)


def directions_from_vectors(v) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`unit_vectors` for arrays of shape ``(..., 3)``.

    Vectors need not be normalised. Returns (azimuth, elevation) in degrees.
    """
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    az = np.rad2deg(np.arctan2(y, x))
    el = np.rad2deg(np.arctan2(z, np.hypot(x, y)))
    return wrap_azimuth(az), el


def doa_to_unit_vector(d: Doa) -> UnitVector:
    x, y, z = unit_vectors(d.azimuth_deg, d.elevation_deg)
    return UnitVector(float(x), float(y), float(z))


def unit_vector_to_doa(u: UnitVector) -> Doa:
    az, el = directions_from_vectors(u.as_array())
    return Doa(float(az), float(np.clip(el, -90.0, 90.0)))


def angular_distance(a: Doa, b: Doa) -> float:
    """Great-circle distance in degrees, in [0, 180]."""
    return float(angular_distances(a.azimuth_deg, a.elevation_deg,
                                   b.azimuth_deg, b.elevation_deg))


def angular_distances(az1, el1, az2, el2):
    """Broadcasting great-circle distance in degrees."""
    u1 = unit_vectors(az1, el1)
    u2 = unit_vectors(az2, el2)
    # atan2 form equals arccos(dot) but stays accurate near 0 and 180 deg
    dot = np.sum(u1 * u2, axis=-1)
    cross = np.linalg.norm(np.cross(u1, u2), axis=-1)
    return np.rad2deg(np.arctan2(cross, dot))


def foa_steering_vector(d: Doa) -> SteeringVector:
    u = doa_to_unit_vector(d)
    return SteeringVector(1.0, u.y, u.z, u.x)


def foa_steering_matrix(az_deg, el_deg) -> np.ndarray:
    """Steering vectors for many directions, shape ``(..., 4)`` in ACN order."""
    u = unit_vectors(az_deg, el_deg)
    ones = np.ones(u.shape[:-1] + (1,))
    return np.concatenate([ones, u[..., 1:2], u[..., 2:3], u[..., 0:1]], axis=-1)


class AngularGrid(Sequence[Doa]):
    """Regular (azimuth, elevation) grid in row-major order: elevation outer.

    Behaves as a read-only sequence of :class:`Doa`; the underlying arrays are
    available as ``azimuths`` / ``elevations`` (1-D axes) and ``az_flat`` /
    ``el_flat`` (per point).
    """

    def __init__(self, resolution_deg: float, elevation_range: Tuple[float, float]):
        r = float(resolution_deg)
        lo, hi = (float(v) for v in elevation_range)
        if r <= 0 or not np.isclose(360.0 / r, round(360.0 / r)):
            raise ValueError(f"resolution {resolution_deg} does not divide 360")
        if not lo < hi:
            raise ValueError(f"empty elevation range [{lo}, {hi})")
        if lo < -90.0 or hi > 90.0 + r:
            raise ValueError(f"elevation range [{lo}, {hi}) leaves the sphere")
        n_az = int(round(360.0 / r))
        n_el = int(np.ceil((hi - lo) / r - 1e-9))
        self.resolution_deg = r
        self.elevation_range = (lo, hi)
        self.azimuths = -180.0 + r * np.arange(n_az)
        self.elevations = lo + r * np.arange(n_el)
        if self.elevations[-1] > 90.0:
            raise ValueError(f"elevation range [{lo}, {hi}) leaves the sphere")

    @property
    def shape(self) -> Tuple[int, int]:
        return (len(self.elevations), len(self.azimuths))

    @cached_property
    def az_flat(self) -> np.ndarray:
        return np.tile(self.azimuths, len(self.elevations))

    @cached_property
    def el_flat(self) -> np.ndarray:
        return np.repeat(self.elevations, len(self.azimuths))

    @cached_property
    def steering(self) -> np.ndarray:
        """``(n_points, 4)`` steering matrix, cached per grid."""
        return foa_steering_matrix(self.az_flat, self.el_flat)

    def __len__(self) -> int:
        return len(self.azimuths) * len(self.elevations)

    @overload
    def __getitem__(self, i: int) -> Doa: ...
    @overload
    def __getitem__(self, i: slice) -> list: ...

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        n = len(self)
        if i < 0:
            i += n
        if not 0 <= i < n:
            raise IndexError(i)
        row, col = divmod(i, len(self.azimuths))
        return Doa(float(self.azimuths[col]), float(self.elevations[row]))

    def __iter__(self) -> Iterator[Doa]:
        for i in range(len(self)):
            yield self[i]


_GRID_CACHE: dict = {}


def angular_grid(resolution_deg: float, elevation_range=(-60.0, 60.0)) -> AngularGrid:
    """Grid of directions at ``resolution_deg`` spacing; cached per parameters."""
    key = (float(resolution_deg), tuple(float(v) for v in elevation_range))
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = _GRID_CACHE[key] = AngularGrid(resolution_deg, elevation_range)
    return grid
