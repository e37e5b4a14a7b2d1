"""Per-point trajectory decoding and box geometry.

Network heads predict, per LiDAR point and per future step ``t``, a
displacement in the point's azimuth-aligned frame, a doubled-angle heading
increment ``(cos 2w, sin 2w)`` and log Laplace scales along/across track.
Everything here is vectorized over a leading pixel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

# front-left, front-right, rear-right, rear-left
CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])
BOX_DIMS = 8


def rotation_2d(angle: np.ndarray) -> np.ndarray:
    """Rotation matrices of shape (..., 2, 2)."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def rotate(vec: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Apply ``R(angle)`` to the trailing 2-vectors of ``vec``."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], -1)


def half_angle(omega: np.ndarray) -> np.ndarray:
    """Heading increment ``0.5 * atan2(w_y, w_x)`` from the doubled-angle encoding."""
    omega = np.asarray(omega, dtype=np.float64)
    if np.any((omega[..., 0] == 0.0) & (omega[..., 1] == 0.0)):
        raise ValueError("orientation encoding (0, 0) has no defined angle")
    return 0.5 * np.arctan2(omega[..., 1], omega[..., 0])


def encode_orientation(angle: np.ndarray) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    return np.stack([np.cos(2.0 * angle), np.sin(2.0 * angle)], -1)


@dataclass(frozen=True)
class TrajectoryConfig:
    horizon: int = 6
    step: float = 0.5
    dims: int = BOX_DIMS

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def steps(self) -> int:
        return self.horizon + 1


@dataclass
class PerPointPrediction:
    """Decoded network outputs for a batch of pixels.

    Shapes: ``class_probs`` (P, C), ``length``/``width`` (P,), and
    ``displacement``/``orientation``/``log_scale`` (P, T+1, 2).
    """

    class_probs: np.ndarray
    length: np.ndarray
    width: np.ndarray
    displacement: np.ndarray
    orientation: np.ndarray
    log_scale: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def __len__(self) -> int:
        return len(self.length)


@dataclass(frozen=True)
class HeadLayout:
    """Channel layout of the raw prediction raster.

    ``C`` class logits, then ``(log l, log w)``, then per step
    ``(d_x, d_y, w_x, w_y, s_x, s_y)``.
    """

    num_classes: int
    horizon: int

    PER_STEP = 6

    @property
    def channels(self) -> int:
        return self.num_classes + 2 + self.PER_STEP * (self.horizon + 1)

    @property
    def box_start(self) -> int:
        return self.num_classes

    def step_channels(self, raw: np.ndarray) -> np.ndarray:
        """View of the per-step block as (..., T+1, 6)."""
        start = self.num_classes + 2
        return raw[..., start:].reshape(raw.shape[:-1] + (self.horizon + 1, self.PER_STEP))

    def split(self, raw: np.ndarray) -> PerPointPrediction:
        """Interpret raw outputs of shape (P, channels)."""
        logits = raw[..., : self.num_classes].astype(np.float64)
        z = logits - logits.max(-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(-1, keepdims=True)
        steps = self.step_channels(raw).astype(np.float64)
        return PerPointPrediction(
            class_probs=probs,
            length=np.exp(raw[..., self.num_classes].astype(np.float64)),
            width=np.exp(raw[..., self.num_classes + 1].astype(np.float64)),
            displacement=steps[..., 0:2],
            orientation=steps[..., 2:4],
            log_scale=steps[..., 4:6],
        )


def decode_t0(point: np.ndarray, theta: np.ndarray, displacement: np.ndarray,
              orientation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Box center and heading at t=0 relative to a LiDAR point.

    ``point`` is the BEV position (..., 2), ``theta`` its azimuth.
    """
    center = np.asarray(point, dtype=np.float64) + rotate(displacement, theta)
    heading = np.asarray(theta, dtype=np.float64) + half_angle(orientation)
    return center, heading


def decode_step(prev_center: np.ndarray, prev_heading: np.ndarray, theta: np.ndarray,
                displacement: np.ndarray, orientation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance a decoded box by one future step (displacement stays in the azimuth frame)."""
    return prev_center + rotate(displacement, theta), prev_heading + half_angle(orientation)


def corners_from_params(center: np.ndarray, heading: np.ndarray, length: np.ndarray,
                        width: np.ndarray) -> np.ndarray:
    """Four BEV corners (..., 4, 2) in front-left, front-right, rear-right, rear-left order."""
    center = np.asarray(center, dtype=np.float64)
    half = np.stack([np.asarray(length, dtype=np.float64), np.asarray(width, dtype=np.float64)], -1) * 0.5
    offsets = CORNER_SIGNS * half[..., None, :]
    return center[..., None, :] + rotate(offsets, np.asarray(heading)[..., None])


def rotate_to_track_frame(corners: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Express corners in axes aligned with (along, across) the heading."""
    return rotate(corners, -np.asarray(heading, dtype=np.float64)[..., None])


def nearest_equivalent_heading(heading: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Shift ``heading`` by a multiple of pi to lie closest to ``reference``.

    Boxes are symmetric, so this only relabels corners.
    """
    k = np.round((np.asarray(reference) - np.asarray(heading)) / math.pi)
    return heading + k * math.pi


@dataclass
class BoxTrajectory:
    """Oriented box over T+1 steps with optional along/cross-track Laplace scales."""

    centers: np.ndarray
    headings: np.ndarray
    length: float
    width: float
    b_along: np.ndarray | None = None
    b_cross: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.headings = np.asarray(self.headings, dtype=np.float64).reshape(-1)
        if len(self.headings) != len(self.centers):
            raise ValueError("centers and headings disagree on step count")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")
        for name in ("b_along", "b_cross"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float64).reshape(-1)
                if np.any(val <= 0):
                    raise ValueError(f"{name} must be positive")
                setattr(self, name, val)

    @property
    def steps(self) -> int:
        return len(self.centers)

    @property
    def corners(self) -> np.ndarray:
        return corners_from_params(self.centers, self.headings, self.length, self.width)

    def transformed(self, angle: float, offset: np.ndarray | None = None) -> "BoxTrajectory":
        """Rigidly rotate by ``angle`` about the origin, then translate."""
        offset = np.zeros(2) if offset is None else np.asarray(offset, dtype=np.float64)
        return BoxTrajectory(rotate(self.centers, angle) + offset, self.headings + angle, self.length,
                             self.width, self.b_along, self.b_cross)

    def to_json(self, step: float = 0.5) -> list[dict[str, Any]]:
        out = []
        corners = self.corners
        for t in range(self.steps):
            item = {
                "t": t * step,
                "center": self.centers[t].tolist(),
                "heading": float(self.headings[t]),
                "corners": corners[t].tolist(),
                "l": float(self.length),
                "w": float(self.width),
            }
            if self.b_along is not None:
                item["b_along"] = float(self.b_along[t])
                item["b_cross"] = float(self.b_cross[t])
            out.append(item)
        return out

    @classmethod
    def from_json(cls, items: list[dict[str, Any]]) -> "BoxTrajectory":
        has_b = "b_along" in items[0]
        return cls(
            centers=[it["center"] for it in items],
            headings=[it["heading"] for it in items],
            length=float(items[0]["l"]),
            width=float(items[0]["w"]),
            b_along=[it["b_along"] for it in items] if has_b else None,
            b_cross=[it["b_cross"] for it in items] if has_b else None,
        )


def decode_trajectories(points: np.ndarray, theta: np.ndarray, pred: PerPointPrediction) -> dict[str, np.ndarray]:
    """Decode every pixel's full trajectory.

    Returns arrays ``centers`` (P, T+1, 2), ``headings`` (P, T+1), ``length``,
    ``width`` (P,) and ``scales`` (P, T+1, 2).
    """
    theta = np.asarray(theta, dtype=np.float64)
    step_offsets = np.cumsum(pred.displacement, axis=-2)
    centers = np.asarray(points, dtype=np.float64)[..., None, :] + rotate(step_offsets, theta[..., None])
    headings = theta[..., None] + np.cumsum(half_angle(pred.orientation), axis=-1)
    return {
        "centers": centers,
        "headings": headings,
        "length": pred.length,
        "width": pred.width,
        "scales": pred.scales,
    }


def to_box_trajectory(decoded: dict[str, np.ndarray], i: int) -> BoxTrajectory:
    return BoxTrajectory(decoded["centers"][i], decoded["headings"][i], float(decoded["length"][i]),
                         float(decoded["width"][i]), decoded["scales"][i, :, 0], decoded["scales"][i, :, 1])


def trajectory_log_prob(traj: BoxTrajectory, observed: BoxTrajectory) -> float:
    """Log density of ``observed`` corners under ``traj``'s factorized Laplace model.

    Both boxes are expressed in ``traj``'s track frame; the along-track scale
    applies to x coordinates and the cross-track scale to y.
    """
    if traj.steps != observed.steps:
        raise ValueError("trajectories have different horizons")
    if traj.b_along is None or traj.b_cross is None:
        raise ValueError("predicted trajectory carries no scales")
    obs_heading = nearest_equivalent_heading(observed.headings, traj.headings)
    obs_corners = corners_from_params(observed.centers, obs_heading, observed.length, observed.width)
    mean = rotate_to_track_frame(traj.corners, traj.headings)
    obs = rotate_to_track_frame(obs_corners, traj.headings)
    b = np.stack([traj.b_along, traj.b_cross], -1)[:, None, :]
    return float(np.sum(-np.log(2.0 * b) - np.abs(obs - mean) / b))
