"""Aggregate per-point trajectory predictions into object detections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from laserflow.trajectory import BoxTrajectory


@dataclass
class Detection:
    score: float
    class_id: int
    trajectory: BoxTrajectory
    num_points: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        if self.num_points < 1:
            raise ValueError("a detection needs at least one supporting point")

    def to_json(self, step: float = 0.5) -> dict:
        return {"score": self.score, "class_id": self.class_id, "num_points": self.num_points,
                "trajectory": self.trajectory.to_json(step)}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(float(d["score"]), int(d["class_id"]), BoxTrajectory.from_json(d["trajectory"]),
                   int(d["num_points"]))


def _weighted_mean(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.tensordot(w, x, axes=(0, 0)) / w.sum()


def _mean_heading(headings: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted mean of box headings modulo pi (doubled-angle average)."""
    c = _weighted_mean(np.cos(2.0 * headings), w)
    s = _weighted_mean(np.sin(2.0 * headings), w)
    return 0.5 * np.arctan2(s, c)


def mean_shift_modes(centers: np.ndarray, weights: np.ndarray, bandwidth: float,
                     origin: np.ndarray | None = None, max_iter: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Grid-seeded flat-kernel mean shift.

    Returns the converged mode of every occupied grid cell and, per point,
    the index of its cell.
    """
    origin = np.zeros(2) if origin is None else np.asarray(origin, dtype=np.float64)
    cells = np.floor((centers - origin) / bandwidth).astype(np.int64)
    uniq, cell_of = np.unique(cells, axis=0, return_inverse=True)
    cell_of = cell_of.reshape(-1)
    wsum = np.bincount(cell_of, weights=weights, minlength=len(uniq))
    modes = np.stack([np.bincount(cell_of, weights=weights * centers[:, k], minlength=len(uniq))
                      for k in range(2)], -1) / wsum[:, None]
    tol = 1e-3 * bandwidth
    active = np.ones(len(modes), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        d2 = np.sum((modes[active, None, :] - centers[None, :, :]) ** 2, -1)
        inside = (d2 <= bandwidth * bandwidth) * weights[None, :]
        total = inside.sum(1)
        shifted = modes[active].copy()
        has = total > 0
        shifted[has] = (inside[has] @ centers) / total[has, None]
        moved = np.linalg.norm(shifted - modes[active], axis=1)
        idx = np.flatnonzero(active)
        modes[idx] = shifted
        active[idx[moved < tol]] = False
    return modes, cell_of


def mean_shift_cluster(
    centers: np.ndarray,
    trajectories: dict[str, np.ndarray],
    probs: np.ndarray,
    bandwidth: float = 0.5,
    score_threshold: float = 0.5,
    class_id: int = 1,
    origin: np.ndarray | None = None,
    max_iter: int = 20,
) -> list[Detection]:
    """Cluster per-point predictions into detections.

    ``centers`` are the t=0 BEV box centers (P, 2), ``trajectories`` the
    decoded per-point arrays (``centers``, ``headings``, ``length``, ``width``
    and optionally ``scales``) and ``probs`` the class probability per point.
    Detections average member predictions weighted by class probability and
    are scored by the members' mean probability.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    keep = np.flatnonzero(probs >= score_threshold)
    if keep.size == 0:
        return []
    # canonical order keeps the result independent of input ordering
    order = keep[np.lexsort((probs[keep], centers[keep, 1], centers[keep, 0]))]
    c = centers[order]
    w = probs[order]
    modes, cell_of = mean_shift_modes(c, w, bandwidth, origin, max_iter)

    support = np.bincount(cell_of, minlength=len(modes))
    seed_order = sorted(range(len(modes)), key=lambda k: (-support[k], k))
    cluster_of_seed = np.empty(len(modes), dtype=np.int64)
    cluster_centers: list[np.ndarray] = []
    for k in seed_order:
        if cluster_centers:
            dist = np.linalg.norm(np.asarray(cluster_centers) - modes[k], axis=1)
            best = int(np.argmin(dist))  # argmin picks the earliest (largest) on ties
            if dist[best] <= bandwidth:
                cluster_of_seed[k] = best
                continue
        cluster_of_seed[k] = len(cluster_centers)
        cluster_centers.append(modes[k])
    labels = cluster_of_seed[cell_of]

    has_scales = "scales" in trajectories
    out = []
    for lab in range(len(cluster_centers)):
        members = order[labels == lab]
        if members.size == 0:
            continue
        mw = probs[members]
        traj = BoxTrajectory(
            centers=_weighted_mean(trajectories["centers"][members], mw),
            headings=_mean_heading(trajectories["headings"][members], mw),
            length=float(_weighted_mean(trajectories["length"][members], mw)),
            width=float(_weighted_mean(trajectories["width"][members], mw)),
            b_along=_weighted_mean(trajectories["scales"][members, :, 0], mw) if has_scales else None,
            b_cross=_weighted_mean(trajectories["scales"][members, :, 1], mw) if has_scales else None,
        )
        out.append(Detection(float(np.clip(mw.mean(), 0.0, 1.0)), class_id, traj, int(members.size)))
    return out


def non_max_suppression(dets: list[Detection], iou_threshold: float = 0.1) -> list[Detection]:
    """Greedy suppression by score using t=0 rotated IoU."""
    from laserflow.metrics import rotated_iou

    ranked = sorted(dets, key=lambda d: -d.score)
    kept: list[Detection] = []
    for d in ranked:
        box = d.trajectory.corners[0]
        if all(rotated_iou(box, k.trajectory.corners[0]) <= iou_threshold for k in kept):
            kept.append(d)
    return kept
