"""Rigid poses, spherical projection, range-image rasterization and warping.

Conventions used throughout the package:

* A :class:`Pose` maps WORLD coordinates into a SENSOR frame,
  ``x_sensor = R @ x_world + t``.
* Sensor frames are x-forward, y-left, z-up.  Azimuth is ``atan2(y, x)`` in
  ``(-pi, pi]`` and elevation is ``arcsin(z / r)``.
* Raster column 0 starts at azimuth ``+pi`` and columns advance clockwise
  (decreasing azimuth); rows follow the elevation table order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

INVALID = -1

RANGE = "range"
REFLECTANCE = "reflectance"
VALID = "valid"
HEIGHT = "height"
ROAD = "road"
BASE_CHANNELS = (RANGE, REFLECTANCE, VALID)
MAP_CHANNELS = (HEIGHT, ROAD)


class DegeneratePointError(ValueError):
    """Raised when a direction is requested for a point at the sensor origin."""


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking world coordinates into a sensor frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_placement(cls, position: Sequence[float], yaw: float) -> "Pose":
        """World->sensor pose of a sensor sitting at ``position`` facing ``yaw``."""
        rot = _rot_z(yaw).T
        return cls(rot, -rot @ np.asarray(position, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def origin(self) -> np.ndarray:
        """Sensor origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def yaw(self) -> float:
        """Heading of the sensor x-axis in the world frame."""
        return math.atan2(self.rotation[0, 1], self.rotation[0, 0])

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self @ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_list(self) -> list[float]:
        """Row-major 3x4 representation."""
        return self.matrix[:3, :].reshape(-1).tolist()

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        m = np.eye(4)
        m[:3, :] = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls.from_matrix(m)


class SphericalCoord(NamedTuple):
    """Range (m), azimuth in (-pi, pi] and elevation in [-pi/2, pi/2] (rad).

    Fields may be scalars or equally shaped arrays.
    """

    range: float | np.ndarray
    azimuth: float | np.ndarray
    elevation: float | np.ndarray


def spherical_to_cartesian(c: SphericalCoord) -> np.ndarray:
    r, theta, phi = (np.asarray(v, dtype=np.float64) for v in c)
    cos_phi = np.cos(phi)
    return np.stack([r * cos_phi * np.cos(theta), r * cos_phi * np.sin(theta), r * np.sin(phi)], axis=-1)


def _wrap_azimuth(theta: np.ndarray) -> np.ndarray:
    return np.where(theta <= -np.pi, theta + 2.0 * np.pi, theta)


def cartesian_to_spherical(x: np.ndarray) -> SphericalCoord:
    """Inverse of :func:`spherical_to_cartesian` for points with nonzero norm."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise DegeneratePointError("cannot compute angles of a zero-norm point")
    theta = _wrap_azimuth(np.arctan2(x[..., 1], x[..., 0]))
    phi = np.arcsin(np.clip(x[..., 2] / r, -1.0, 1.0))
    if r.ndim == 0:
        return SphericalCoord(float(r), float(theta), float(phi))
    return SphericalCoord(r, theta, phi)


def transform_point(p_src: Pose, p_dst: Pose, x: np.ndarray) -> np.ndarray:
    """Map points from the ``p_src`` sensor frame into the ``p_dst`` sensor frame."""
    return p_dst.compose(p_src.inverse()).apply(x)


@dataclass(frozen=True)
class RasterConfig:
    """Range-image layout: column count, elevation table and azimuth origin."""

    width: int
    elevations: tuple[float, ...]
    azimuth_origin: float = math.pi
    clockwise: bool = True

    def __post_init__(self) -> None:
        if self.width < 1 or len(self.elevations) < 1:
            raise ValueError("raster needs at least one row and one column")
        diffs = np.diff(np.asarray(self.elevations, dtype=np.float64))
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("elevation table must be strictly monotone")
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))

    @classmethod
    def uniform(cls, width: int, height: int, fov_up: float, fov_down: float) -> "RasterConfig":
        """Evenly spaced beams, row 0 at ``fov_up`` (radians)."""
        if height == 1:
            return cls(width, (0.5 * (fov_up + fov_down),))
        return cls(width, tuple(np.linspace(fov_up, fov_down, height)))

    @property
    def height(self) -> int:
        return len(self.elevations)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.width

    def column_of(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        offset = (self.azimuth_origin - theta) if self.clockwise else (theta - self.azimuth_origin)
        col = np.floor(np.mod(offset, 2.0 * math.pi) / self.azimuth_step).astype(np.int64)
        return np.minimum(col, self.width - 1)

    def column_azimuth(self, col: np.ndarray | None = None) -> np.ndarray:
        """Azimuth at the center of each column."""
        if col is None:
            col = np.arange(self.width)
        offset = (np.asarray(col, dtype=np.float64) + 0.5) * self.azimuth_step
        theta = self.azimuth_origin - offset if self.clockwise else self.azimuth_origin + offset
        return _wrap_azimuth(np.mod(theta + math.pi, 2.0 * math.pi) - math.pi)

    def _elevation_edges(self) -> np.ndarray:
        elev = np.asarray(self.elevations, dtype=np.float64)
        if len(elev) == 1:
            half = math.radians(0.5)
            return np.array([elev[0] - half, elev[0] + half])
        ascending = elev[::-1] if elev[0] > elev[-1] else elev
        mids = 0.5 * (ascending[1:] + ascending[:-1])
        lo = ascending[0] - (mids[0] - ascending[0])
        hi = ascending[-1] + (ascending[-1] - mids[-1])
        return np.concatenate([[lo], mids, [hi]])

    def row_of(self, phi: np.ndarray) -> np.ndarray:
        """Row index for each elevation, or ``INVALID`` outside the table."""
        phi = np.asarray(phi, dtype=np.float64)
        edges = self._elevation_edges()
        idx = np.searchsorted(edges, phi, side="right") - 1
        outside = (phi < edges[0]) | (phi >= edges[-1])
        if self.height > 1 and self.elevations[0] > self.elevations[-1]:
            idx = self.height - 1 - idx
        return np.where(outside, INVALID, idx).astype(np.int64)

    def beam_directions(self) -> np.ndarray:
        """Unit direction of every pixel's beam center, shape (H, W, 3)."""
        theta, phi = np.meshgrid(self.column_azimuth(), np.asarray(self.elevations))
        return spherical_to_cartesian(SphericalCoord(np.ones_like(theta), theta, phi))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "elevations": list(self.elevations),
            "azimuth_origin": self.azimuth_origin,
            "clockwise": self.clockwise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RasterConfig":
        return cls(int(d["width"]), tuple(d["elevations"]), float(d.get("azimuth_origin", math.pi)),
                   bool(d.get("clockwise", True)))


@dataclass
class RangeImage:
    """H x W x C raster of returns, the sensor pose and the sweep index.

    ``points`` holds the exact sensor-frame coordinates of each valid return;
    it is what warping re-projects, so re-rasterized images stay exact.
    """

    raster: np.ndarray
    pose: Pose
    sweep_index: int = 0
    channels: tuple[str, ...] = BASE_CHANNELS
    points: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self) -> None:
        if self.sweep_index > 0:
            raise ValueError("sweep index must be <= 0")
        self.raster = np.asarray(self.raster, dtype=np.float32)
        if self.raster.ndim != 3 or self.raster.shape[2] != len(self.channels):
            raise ValueError(f"raster shape {self.raster.shape} does not match channels {self.channels}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.raster.shape[:2]

    def channel(self, name: str) -> np.ndarray:
        return self.raster[..., self.channels.index(name)]

    @property
    def valid(self) -> np.ndarray:
        return self.channel(VALID) > 0.5

    @property
    def range(self) -> np.ndarray:
        return self.channel(RANGE)

    def points_or_beams(self, cfg: RasterConfig) -> np.ndarray:
        """Sensor-frame points; falls back to beam centers scaled by range."""
        if self.points is not None:
            return self.points
        pts = cfg.beam_directions() * self.range.astype(np.float64)[..., None]
        pts[~self.valid] = 0.0
        return pts


def build_range_image(
    coords: SphericalCoord,
    reflectance: np.ndarray,
    cfg: RasterConfig,
    pose: Pose,
    aux: dict[str, np.ndarray] | None = None,
    sweep_index: int = 0,
) -> RangeImage:
    """Rasterize sensor-frame returns; colliding returns keep the nearest.

    Returns with an elevation outside the table are dropped and counted in
    ``RangeImage.dropped``.
    """
    aux = aux or {}
    r = np.atleast_1d(np.asarray(coords.range, dtype=np.float64))
    theta = np.atleast_1d(np.asarray(coords.azimuth, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(coords.elevation, dtype=np.float64))
    refl = np.atleast_1d(np.asarray(reflectance, dtype=np.float64))
    channels = BASE_CHANNELS + tuple(k for k in MAP_CHANNELS if k in aux)
    h, w = cfg.shape
    raster = np.zeros((h, w, len(channels)), dtype=np.float32)
    points = np.zeros((h, w, 3))

    rows = cfg.row_of(phi) if r.size else np.zeros(0, dtype=np.int64)
    cols = cfg.column_of(theta) if r.size else np.zeros(0, dtype=np.int64)
    keep = (rows != INVALID) & (r > 0)
    dropped = int(np.count_nonzero(rows == INVALID))
    idx = np.flatnonzero(keep)
    if idx.size:
        flat = rows[idx] * w + cols[idx]
        order = np.lexsort((idx, r[idx], flat))
        first = np.ones(order.size, dtype=bool)
        first[1:] = flat[order][1:] != flat[order][:-1]
        win = idx[order[first]]
        rr, cc = rows[win], cols[win]
        raster[rr, cc, 0] = r[win]
        raster[rr, cc, 1] = refl[win]
        raster[rr, cc, 2] = 1.0
        for k, name in enumerate(channels[3:], start=3):
            raster[rr, cc, k] = np.atleast_1d(aux[name])[win]
        points[rr, cc] = spherical_to_cartesian(SphericalCoord(r[win], theta[win], phi[win]))
    return RangeImage(raster, pose, sweep_index, channels, points, dropped)


@dataclass
class WarpMap:
    """Per source pixel target (row, col) and warped range; ``INVALID`` if unmapped."""

    rows: np.ndarray
    cols: np.ndarray
    ranges: np.ndarray
    points: np.ndarray = field(repr=False)

    @property
    def mapped(self) -> np.ndarray:
        return self.rows != INVALID

    @classmethod
    def identity(cls, valid: np.ndarray, ranges: np.ndarray | None = None) -> "WarpMap":
        h, w = valid.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rng = np.zeros((h, w)) if ranges is None else np.asarray(ranges, dtype=np.float64)
        return cls(np.where(valid, rr, INVALID), np.where(valid, cc, INVALID),
                   np.where(valid, rng, 0.0), np.zeros((h, w, 3)))


def compute_warp_mapping(prev: RangeImage, current_pose: Pose, cfg: RasterConfig) -> WarpMap:
    """Map every valid pixel of ``prev`` into the raster of ``current_pose``.

    When several source pixels land on one target only the one with the
    smallest warped range keeps it; the others become ``INVALID``.
    """
    h, w = cfg.shape
    valid = prev.valid
    src_pts = prev.points_or_beams(cfg)
    rows = np.full((h, w), INVALID, dtype=np.int64)
    cols = np.full((h, w), INVALID, dtype=np.int64)
    ranges = np.zeros((h, w))
    warped = np.zeros((h, w, 3))

    idx = np.flatnonzero(valid.reshape(-1))
    if idx.size == 0:
        return WarpMap(rows, cols, ranges, warped)
    x = transform_point(prev.pose, current_pose, src_pts.reshape(-1, 3)[idx])
    r = np.linalg.norm(x, axis=-1)
    ok = r > 0
    idx, x, r = idx[ok], x[ok], r[ok]
    if idx.size == 0:
        return WarpMap(rows, cols, ranges, warped)
    sph = cartesian_to_spherical(x)
    t_rows = cfg.row_of(np.atleast_1d(sph.elevation))
    t_cols = cfg.column_of(np.atleast_1d(sph.azimuth))
    inside = t_rows != INVALID
    idx, x, r, t_rows, t_cols = idx[inside], x[inside], r[inside], t_rows[inside], t_cols[inside]
    if idx.size == 0:
        return WarpMap(rows, cols, ranges, warped)
    target = t_rows * w + t_cols
    order = np.lexsort((idx, r, target))
    first = np.ones(order.size, dtype=bool)
    first[1:] = target[order][1:] != target[order][:-1]
    win = order[first]
    src = idx[win]
    rows.reshape(-1)[src] = t_rows[win]
    cols.reshape(-1)[src] = t_cols[win]
    ranges.reshape(-1)[src] = r[win]
    warped.reshape(-1, 3)[src] = x[win]
    return WarpMap(rows, cols, ranges, warped)


def apply_warp(features: np.ndarray, wmap: WarpMap, fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Scatter source features to their targets; holes get ``fill`` and mask 0."""
    h, w = wmap.rows.shape
    if features.shape[:2] != (h, w):
        raise ValueError("feature raster does not match warp map")
    out = np.full(features.shape, fill, dtype=features.dtype)
    mask = np.zeros((h, w), dtype=features.dtype)
    src = wmap.mapped
    out[wmap.rows[src], wmap.cols[src]] = features[src]
    mask[wmap.rows[src], wmap.cols[src]] = 1
    return out, mask


def warp_range_image(prev: RangeImage, current_pose: Pose, cfg: RasterConfig) -> RangeImage:
    """Re-render ``prev`` in the raster of ``current_pose`` (early fusion input)."""
    wmap = compute_warp_mapping(prev, current_pose, cfg)
    raster, _ = apply_warp(prev.raster, wmap, 0.0)
    src = wmap.mapped
    tr, tc = wmap.rows[src], wmap.cols[src]
    raster[tr, tc, prev.channels.index(RANGE)] = wmap.ranges[src]
    points = np.zeros(raster.shape[:2] + (3,))
    points[tr, tc] = wmap.points[src]
    return RangeImage(raster, current_pose, prev.sweep_index, prev.channels, points)
