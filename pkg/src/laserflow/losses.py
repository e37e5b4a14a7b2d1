"""Focal classification loss, Laplace KL regression and the uncertainty curriculum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from laserflow.trajectory import (
    BOX_DIMS,
    CORNER_SIGNS,
    corners_from_params,
    nearest_equivalent_heading,
    rotate,
)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    lam: float = 4.0
    eta: float = 1.00
    epsilon: float = 0.05
    beta: float | None = None
    curriculum: str = "uncertainty"
    regression: str = "kl"

    def __post_init__(self) -> None:
        if self.gamma < 0 or self.lam <= 0 or self.eta <= 0 or self.epsilon <= 0:
            raise ValueError("invalid loss constants")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.curriculum not in ("uncertainty", "weight", "none"):
            raise ValueError(f"unknown curriculum mode {self.curriculum!r}")
        if self.regression not in ("kl", "l1"):
            raise ValueError(f"unknown regression mode {self.regression!r}")


def default_beta(total_iterations: int) -> float:
    """Decay rate giving alpha = 1e-3 half-way through training."""
    return 2.0 * math.log(1000.0) / max(total_iterations, 1)


@dataclass(frozen=True)
class CurriculumState:
    iteration: int
    total: int
    beta: float | None = None

    @property
    def rate(self) -> float:
        return self.beta if self.beta is not None else default_beta(self.total)

    @property
    def alpha(self) -> float:
        return math.exp(-self.rate * self.iteration)


def curriculum_scale(t: int | np.ndarray, horizon: int, cfg: LossConfig, state: CurriculumState) -> np.ndarray | float:
    """Ground-truth Laplace scale for step ``t`` (meters)."""
    alpha = 0.0 if cfg.curriculum == "none" else state.alpha
    b_max = np.asarray(t, dtype=np.float64) / horizon * cfg.eta + cfg.epsilon
    out = alpha * b_max + (1.0 - alpha) * cfg.epsilon
    return float(out) if np.ndim(out) == 0 else out


def ground_truth_scales(horizon: int, cfg: LossConfig, state: CurriculumState) -> np.ndarray:
    """Per-step ground-truth scales used by the regression loss.

    With the weight curriculum the scales stay at epsilon and the schedule
    moves into :func:`step_weights` instead.
    """
    if cfg.curriculum == "weight":
        return np.full(horizon + 1, cfg.epsilon)
    return curriculum_scale(np.arange(horizon + 1), horizon, cfg, state)


def step_weights(horizon: int, cfg: LossConfig, state: CurriculumState) -> np.ndarray:
    if cfg.curriculum != "weight":
        return np.ones(horizon + 1)
    scheduled = curriculum_scale(np.arange(horizon + 1), horizon, LossConfig(
        cfg.gamma, cfg.lam, cfg.eta, cfg.epsilon, cfg.beta, "uncertainty"), state)
    return cfg.epsilon / scheduled


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


@dataclass
class FocalResult:
    loss: float
    grad_logits: np.ndarray
    clamped: int = 0


def focal_loss(probs: np.ndarray, labels: np.ndarray, gamma: float = 2.0) -> FocalResult:
    """Mean focal loss over all pixels and its gradient w.r.t. the softmax logits."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    p_true = np.take_along_axis(probs, labels[..., None], -1)[..., 0]
    clamped = int(np.count_nonzero(p_true < PROB_FLOOR))
    p = np.maximum(p_true, PROB_FLOOR)
    one_minus = 1.0 - p
    loss = float(np.sum(-(one_minus ** gamma) * np.log(p)) / n)

    if gamma == 0:
        dl_dp = -1.0 / p
    else:
        dl_dp = gamma * one_minus ** (gamma - 1.0) * np.log(p) - one_minus ** gamma / p
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, -1)
    grad = (dl_dp * p)[..., None] * (onehot - probs) / n
    return FocalResult(loss, grad, clamped)


def _check_scales(*scales: np.ndarray) -> None:
    for s in scales:
        if np.any(np.asarray(s) <= 0):
            raise ValueError("Laplace scale must be positive")


def laplace_kl(mu_gt, b_gt, mu, b):
    """KL(Laplace(mu_gt, b_gt) || Laplace(mu, b))."""
    _check_scales(b_gt, b)
    diff = np.abs(np.asarray(mu, dtype=np.float64) - mu_gt)
    return np.log(b / np.asarray(b_gt, dtype=np.float64)) + (b_gt * np.exp(-diff / b_gt) + diff) / b - 1.0


def laplace_kl_dmu(mu_gt, b_gt, mu, b):
    """Derivative of :func:`laplace_kl` w.r.t. the predicted mean."""
    _check_scales(b_gt, b)
    delta = np.asarray(mu, dtype=np.float64) - mu_gt
    return np.sign(delta) / b * (1.0 - np.exp(-np.abs(delta) / b_gt))


def laplace_kl_dlogb(mu_gt, b_gt, mu, b):
    """Derivative of :func:`laplace_kl` w.r.t. ``log b``."""
    _check_scales(b_gt, b)
    diff = np.abs(np.asarray(mu, dtype=np.float64) - mu_gt)
    return 1.0 - (b_gt * np.exp(-diff / b_gt) + diff) / b


@dataclass
class BoxTargets:
    """Ground truth per regressed pixel: centers (P, T+1, 2), headings (P, T+1), size (P,)."""

    centers: np.ndarray
    headings: np.ndarray
    length: np.ndarray
    width: np.ndarray


@dataclass
class RegressionResult:
    loss: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def regression_loss(
    pred: dict[str, np.ndarray],
    gt: BoxTargets,
    b_gt: np.ndarray,
    pixel_weight: np.ndarray,
    step_weight: np.ndarray | None = None,
    mode: str = "kl",
) -> RegressionResult:
    """Laplace KL between track-frame corners of predicted and target boxes.

    ``pred`` holds ``centers`` (P, T+1, 2), ``headings`` (P, T+1), ``length``,
    ``width`` (P,) and ``log_scale`` (P, T+1, 2) with along-track scale first.
    Each (pixel, step) term is averaged over the 8 corner coordinates and the
    T+1 steps, then weighted by ``pixel_weight`` (which should sum to one over
    objects). Gradients are returned for every entry of ``pred``.
    """
    centers, headings = pred["centers"], pred["headings"]
    length, width, log_scale = pred["length"], pred["width"], pred["log_scale"]
    n_pix, steps = headings.shape
    if gt.centers.shape[:2] != (n_pix, steps) or len(pixel_weight) != n_pix:
        raise ValueError("prediction/target count mismatch")
    if step_weight is None:
        step_weight = np.ones(steps)
    b_gt = np.asarray(b_gt, dtype=np.float64)
    _check_scales(b_gt)

    gt_heading = nearest_equivalent_heading(gt.headings, headings)
    gt_corners = corners_from_params(gt.centers, gt_heading, gt.length[:, None], gt.width[:, None])
    v = centers[:, :, None, :] - gt_corners
    u = rotate(v, -headings[:, :, None])
    half = np.stack([length, width], -1) * 0.5
    offsets = CORNER_SIGNS[None, None] * half[:, None, None, :]
    delta = u + offsets

    weight = (pixel_weight[:, None] * step_weight[None, :] / (steps * BOX_DIMS))[:, :, None, None]
    adelta = np.abs(delta)
    sign = np.sign(delta)
    if mode == "kl":
        b = np.exp(log_scale)[:, :, None, :]
        bt = b_gt[None, :, None, None]
        ex = np.exp(-adelta / bt)
        terms = np.log(b / bt) + (bt * ex + adelta) / b - 1.0
        g_delta = weight * sign / b * (1.0 - ex)
        g_logs = np.sum(weight * (1.0 - (bt * ex + adelta) / b), axis=2)
    elif mode == "l1":
        terms = adelta
        g_delta = weight * sign
        g_logs = np.zeros_like(log_scale)
    else:
        raise ValueError(f"unknown regression mode {mode!r}")
    loss = float(np.sum(weight * terms))

    g_centers = np.sum(rotate(g_delta, headings[:, :, None]), axis=2)
    g_headings = np.sum(g_delta[..., 0] * u[..., 1] - g_delta[..., 1] * u[..., 0], axis=2)
    g_half = np.sum(g_delta * CORNER_SIGNS[None, None], axis=(1, 2))
    return RegressionResult(loss, {
        "centers": g_centers,
        "headings": g_headings,
        "length": 0.5 * g_half[:, 0],
        "width": 0.5 * g_half[:, 1],
        "log_scale": g_logs,
    })


def head_regression_loss(
    box_raw: np.ndarray,
    points: np.ndarray,
    theta: np.ndarray,
    gt: BoxTargets,
    b_gt: np.ndarray,
    pixel_weight: np.ndarray,
    step_weight: np.ndarray | None = None,
    mode: str = "kl",
) -> RegressionResult:
    """Regression loss on raw box channels, back-propagated through decoding.

    ``box_raw`` is (P, 2 + 6(T+1)): ``log l, log w`` followed by per-step
    ``(d_x, d_y, w_x, w_y, s_x, s_y)``. The gradient w.r.t. ``box_raw`` is
    returned under ``grads["raw"]``.
    """
    box_raw = np.asarray(box_raw, dtype=np.float64)
    n_pix = box_raw.shape[0]
    steps = box_raw[:, 2:].reshape(n_pix, -1, 6)
    disp, omega, log_scale = steps[..., 0:2], steps[..., 2:4], steps[..., 4:6]
    theta = np.asarray(theta, dtype=np.float64)

    sq = omega[..., 0] ** 2 + omega[..., 1] ** 2
    if np.any(sq == 0.0):
        raise ValueError("orientation encoding (0, 0) has no defined angle")
    psi = 0.5 * np.arctan2(omega[..., 1], omega[..., 0])
    headings = theta[:, None] + np.cumsum(psi, axis=1)
    centers = points[:, None, :] + rotate(np.cumsum(disp, axis=1), theta[:, None])
    length, width = np.exp(box_raw[:, 0]), np.exp(box_raw[:, 1])

    res = regression_loss(
        {"centers": centers, "headings": headings, "length": length, "width": width, "log_scale": log_scale},
        gt, b_gt, pixel_weight, step_weight, mode,
    )
    g = res.grads
    g_disp = rotate(np.cumsum(g["centers"][:, ::-1], axis=1)[:, ::-1], -theta[:, None])
    g_psi = np.cumsum(g["headings"][:, ::-1], axis=1)[:, ::-1]
    g_omega = np.stack([-0.5 * omega[..., 1] / sq, 0.5 * omega[..., 0] / sq], -1) * g_psi[..., None]
    g_steps = np.concatenate([g_disp, g_omega, g["log_scale"]], -1)
    raw_grad = np.concatenate([
        (g["length"] * length)[:, None],
        (g["width"] * width)[:, None],
        g_steps.reshape(n_pix, -1),
    ], -1)
    res.grads["raw"] = raw_grad
    return res


def weight_curriculum_loss(
    box_raw: np.ndarray,
    points: np.ndarray,
    theta: np.ndarray,
    gt: BoxTargets,
    weights: np.ndarray,
    pixel_weight: np.ndarray,
    epsilon: float = 0.05,
) -> RegressionResult:
    """Regression at a fixed ground-truth scale ``epsilon`` with per-step weights."""
    steps = len(weights)
    return head_regression_loss(box_raw, points, theta, gt, np.full(steps, epsilon), pixel_weight,
                                np.asarray(weights, dtype=np.float64))


def total_loss(cls: float, reg: float, lam: float = 4.0) -> float:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return cls + lam * reg
