"""Rotated-box IoU, average precision, L2 at fixed recall and calibration curves.

Detections and ground truth are given per frame: ``dets[f]`` is a list of
:class:`~laserflow.clustering.Detection` and ``gts[f]`` a list of
:class:`~laserflow.trajectory.BoxTrajectory`. Matching is greedy by
descending score within each frame; AP uses all-point interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from laserflow.clustering import Detection
from laserflow.trajectory import BoxTrajectory, nearest_equivalent_heading, corners_from_params, \
    rotate_to_track_frame


class RecallUnreachableError(ValueError):
    def __init__(self, target: float, achievable: float):
        super().__init__(f"recall {target:.3f} unreachable; maximum achievable recall is {achievable:.3f}")
        self.target = target
        self.achievable = achievable


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly[::-1] if polygon_area(poly) < 0 else poly


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = out
        out = []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def rotated_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two convex quadrilaterals given as (4, 2) corner arrays."""
    a = _ccw(np.asarray(a, dtype=np.float64))
    b = _ccw(np.asarray(b, dtype=np.float64))
    area_a, area_b = polygon_area(a), polygon_area(b)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    # cheap reject on bounding circles
    ca, cb = a.mean(0), b.mean(0)
    ra = np.max(np.linalg.norm(a - ca, axis=1))
    rb = np.max(np.linalg.norm(b - cb, axis=1))
    if np.linalg.norm(ca - cb) > ra + rb:
        return 0.0
    inter = max(polygon_area(clip_polygon(a, b)), 0.0)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


@dataclass
class MatchResult:
    """Greedy one-to-one matching for one frame."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (det, gt, iou)
    unmatched_dets: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)
    ignored_dets: list[int] = field(default_factory=list)


def _det_order(dets: list[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_frame(dets: list[Detection], gts: list[BoxTrajectory], iou_threshold: float,
                ignore: list[BoxTrajectory] | None = None) -> MatchResult:
    """Each detection, by descending score, takes the best still-unmatched GT.

    Unmatched detections overlapping an ``ignore`` box are neither true nor
    false positives.
    """
    res = MatchResult()
    taken = np.zeros(len(gts), dtype=bool)
    gt_boxes = [g.corners[0] for g in gts]
    ign_boxes = [g.corners[0] for g in (ignore or [])]
    for i in _det_order(dets):
        box = dets[i].trajectory.corners[0]
        best, best_iou = -1, iou_threshold
        for j, gb in enumerate(gt_boxes):
            if taken[j]:
                continue
            iou = rotated_iou(box, gb)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            res.pairs.append((i, best, best_iou))
        elif any(rotated_iou(box, ib) >= iou_threshold for ib in ign_boxes):
            res.ignored_dets.append(i)
        else:
            res.unmatched_dets.append(i)
    res.unmatched_gts = [j for j in range(len(gts)) if not taken[j]]
    return res


def _pooled(dets, gts, iou_threshold, ignore):
    """Score-sorted detections over all frames with their TP flag and matched GT."""
    rows = []
    for f, (fd, fg) in enumerate(zip(dets, gts)):
        m = match_frame(fd, fg, iou_threshold, ignore[f] if ignore else None)
        tp = {i: j for i, j, _ in m.pairs}
        skip = set(m.ignored_dets)
        for i in _det_order(fd):
            if i not in skip:
                rows.append((fd[i].score, f, i, i in tp, tp.get(i, -1)))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    return rows


def precision_recall(dets, gts, iou_threshold, ignore=None) -> tuple[np.ndarray, np.ndarray]:
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    rows = _pooled(dets, gts, iou_threshold, ignore)
    tp = np.cumsum([r[3] for r in rows], dtype=np.float64)
    fp = np.cumsum([not r[3] for r in rows], dtype=np.float64)
    if not rows:
        return np.zeros(0), np.zeros(0)
    return tp / np.maximum(tp + fp, 1e-12), tp / n_gt


def average_precision(dets: list[list[Detection]], gts: list[list[BoxTrajectory]], iou_threshold: float = 0.7,
                      ignore: list[list[BoxTrajectory]] | None = None) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    precision, recall = precision_recall(dets, gts, iou_threshold, ignore)
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class L2Result:
    threshold: float
    recall: float
    errors_cm: np.ndarray  # per step
    pairs: list[tuple[int, int, int]]  # (frame, det, gt)


def l2_at_recall(dets: list[list[Detection]], gts: list[list[BoxTrajectory]], recall_point: float = 0.8,
                 match_iou: float = 0.5, ignore: list[list[BoxTrajectory]] | None = None) -> L2Result:
    """Mean center error per step at the highest score threshold reaching ``recall_point``."""
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise ValueError("no ground truth to evaluate")
    rows = _pooled(dets, gts, match_iou, ignore)
    tp = 0
    cut = None
    for k, r in enumerate(rows):
        tp += r[3]
        # a threshold keeps every detection sharing the cut score
        if tp / n_gt >= recall_point - 1e-12 and (k + 1 == len(rows) or rows[k + 1][0] < r[0]):
            cut = k
            break
    if cut is None:
        raise RecallUnreachableError(recall_point, tp / n_gt)
    kept = rows[:cut + 1]
    pairs = [(f, i, j) for _, f, i, is_tp, j in kept if is_tp]
    err = np.array([np.linalg.norm(dets[f][i].trajectory.centers - gts[f][j].centers, axis=1)
                    for f, i, j in pairs])
    return L2Result(kept[-1][0], len(pairs) / n_gt, 100.0 * err.mean(0), pairs)


def laplace_cdf(x, mu, b):
    x, mu, b = (np.asarray(v, dtype=np.float64) for v in (x, mu, b))
    z = (x - mu) / b
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))


@dataclass
class CalibrationCurve:
    expected: np.ndarray
    observed: np.ndarray
    count: int = 0

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.observed - self.expected)))


def calibration_curve(mu, b, gt, num_points: int = 20) -> CalibrationCurve:
    """Empirical CDF of ``F(gt; mu, b)`` at evenly spaced expected probabilities."""
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("scales must be positive")
    u = np.sort(laplace_cdf(gt, mu, b).reshape(-1))
    expected = np.linspace(0.0, 1.0, num_points)
    observed = np.searchsorted(u, expected, side="right") / max(len(u), 1)
    return CalibrationCurve(expected, observed, len(u))


def track_frame_samples(pairs: list[tuple[Detection, BoxTrajectory]]) -> dict[str, np.ndarray]:
    """Track-frame corner means, scales and ground truth for matched pairs.

    Returns arrays of shape (pairs, T+1, 4) keyed ``mu_along``, ``b_along``,
    ``gt_along`` and the ``cross`` equivalents.
    """
    mu, gt, ba, bc = [], [], [], []
    for det, g in pairs:
        tr = det.trajectory
        heading = nearest_equivalent_heading(g.headings, tr.headings)
        g_corners = corners_from_params(g.centers, heading, g.length, g.width)
        mu.append(rotate_to_track_frame(tr.corners, tr.headings))
        gt.append(rotate_to_track_frame(g_corners, tr.headings))
        ba.append(np.repeat(tr.b_along[:, None], 4, 1))
        bc.append(np.repeat(tr.b_cross[:, None], 4, 1))
    mu, gt = np.asarray(mu), np.asarray(gt)
    return {"mu_along": mu[..., 0], "gt_along": gt[..., 0], "b_along": np.asarray(ba),
            "mu_cross": mu[..., 1], "gt_cross": gt[..., 1], "b_cross": np.asarray(bc)}


def track_calibration(pairs: list[tuple[Detection, BoxTrajectory]], num_points: int = 20) -> dict[tuple[int, str], CalibrationCurve]:
    """Calibration curve per (step, 'along' | 'cross')."""
    if not pairs:
        return {}
    s = track_frame_samples(pairs)
    out = {}
    for t in range(s["mu_along"].shape[1]):
        for dim in ("along", "cross"):
            out[(t, dim)] = calibration_curve(s[f"mu_{dim}"][:, t], s[f"b_{dim}"][:, t], s[f"gt_{dim}"][:, t],
                                              num_points)
    return out


def roi_filter(boxes: list, half_x: float = 72.0, half_y: float = 40.0) -> list:
    """Keep items whose t=0 center lies in the ego-centered rectangle (default 144 x 80 m)."""
    def center(item):
        traj = item.trajectory if isinstance(item, Detection) else item
        return traj.centers[0]
    return [b for b in boxes if abs(center(b)[0]) <= half_x and abs(center(b)[1]) <= half_y]
