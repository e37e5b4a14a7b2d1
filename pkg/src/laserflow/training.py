"""Training loop, inference pipeline, evaluation protocol and ablations."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from laserflow import io
from laserflow import netcore as nc
from laserflow.clustering import Detection, mean_shift_cluster, non_max_suppression
from laserflow.losses import (
    BoxTargets,
    CurriculumState,
    LossConfig,
    focal_loss,
    ground_truth_scales,
    head_regression_loss,
    softmax,
    step_weights,
    total_loss,
)
from laserflow.metrics import (
    RecallUnreachableError,
    average_precision,
    l2_at_recall,
    roi_filter,
    track_calibration,
)
from laserflow.model import LaserFlowNet, ModelConfig, ModelInputs, prepare_inputs
from laserflow.simulator import SweepSequence
from laserflow.trajectory import BoxTrajectory, decode_trajectories

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, detail: str = "loss"):
        super().__init__(f"non-finite {detail} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    learning_rate: float = 2e-3
    final_lr_fraction: float = 0.05
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.learning_rate <= 0 or self.checkpoint_interval < 1:
            raise ValueError("invalid training configuration")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must lie in (0, 1]")

    def lr_at(self, k: int) -> float:
        """Exponential decay from ``learning_rate`` to ``final_lr_fraction`` of it."""
        if self.iterations == 0:
            return self.learning_rate
        return self.learning_rate * self.final_lr_fraction ** (k / self.iterations)


@dataclass
class Targets:
    """Per-frame supervision: class label per pixel and box targets for on-object pixels."""

    labels: np.ndarray  # (H, W)
    rows: np.ndarray
    cols: np.ndarray
    boxes: BoxTargets
    pixel_weight: np.ndarray
    actor_of_pixel: np.ndarray


def build_targets(seq: SweepSequence) -> Targets:
    valid = seq.current.valid
    on = valid & (seq.actor_ids >= 0) & (seq.class_ids > 0)
    labels = np.where(valid, seq.class_ids, 0)
    rows, cols = np.nonzero(on)
    actors = seq.actor_ids[rows, cols]
    if seq.trajectories:
        centers = np.stack([t.centers for t in seq.trajectories])[actors]
        headings = np.stack([t.headings for t in seq.trajectories])[actors]
        length = np.array([t.length for t in seq.trajectories])[actors]
        width = np.array([t.width for t in seq.trajectories])[actors]
    else:
        steps = seq.meta.get("horizon", 0) + 1
        centers, headings = np.zeros((0, steps, 2)), np.zeros((0, steps))
        length = width = np.zeros(0)
    counts = np.bincount(actors, minlength=len(seq.trajectories))
    n_obj = max(int(np.count_nonzero(counts)), 1)
    weight = 1.0 / (n_obj * counts[actors]) if len(actors) else np.zeros(0)
    return Targets(labels, rows, cols, BoxTargets(centers, headings, length, width), weight, actors)


@dataclass
class StepLoss:
    total: float
    cls: float
    reg: float


def loss_and_grad(raw: np.ndarray, inputs: ModelInputs, targets: Targets, cfg: ModelConfig, loss_cfg: LossConfig,
                  state: CurriculumState) -> tuple[StepLoss, np.ndarray]:
    """Total loss for one frame and its gradient w.r.t. the raw prediction raster."""
    lay = cfg.layout
    c = lay.num_classes
    logits = raw[..., :c].astype(np.float64)
    focal = focal_loss(softmax(logits), targets.labels, loss_cfg.gamma)
    dy = np.zeros(raw.shape, dtype=np.float64)
    dy[..., :c] = focal.grad_logits
    reg = 0.0
    if len(targets.rows):
        box_raw = raw[targets.rows, targets.cols, lay.box_start:]
        b_gt = ground_truth_scales(lay.horizon, loss_cfg, state)
        res = head_regression_loss(
            box_raw, inputs.points[targets.rows, targets.cols], inputs.theta[targets.rows, targets.cols],
            targets.boxes, b_gt, targets.pixel_weight, step_weights(lay.horizon, loss_cfg, state),
            loss_cfg.regression,
        )
        reg = res.loss
        dy[targets.rows, targets.cols, lay.box_start:] = loss_cfg.lam * res.grads["raw"]
    return StepLoss(total_loss(focal.loss, reg, loss_cfg.lam), focal.loss, reg), dy


@dataclass
class TrainResult:
    net: LaserFlowNet
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0


LOSS_FIELDS = ("iteration", "lr", "L_total", "L_cls", "L_reg", "alpha")


def _curriculum_row(k: int, horizon: int, loss_cfg: LossConfig, state: CurriculumState) -> dict:
    alpha = 0.0 if loss_cfg.curriculum == "none" else state.alpha
    row = {"iteration": k, "alpha": alpha}
    # the scheduled scale trace is logged for every curriculum mode
    sched = ground_truth_scales(horizon, replace(loss_cfg, curriculum="uncertainty"), state) \
        if loss_cfg.curriculum == "weight" else ground_truth_scales(horizon, loss_cfg, state)
    for t, b in enumerate(sched):
        row[f"b_{t}"] = float(b)
    return row


def write_loss_csv(history: list[dict], path: Path) -> None:
    if not history:
        fields = list(LOSS_FIELDS)
    else:
        fields = list(LOSS_FIELDS) + [k for k in history[0] if k.startswith("b_")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(
    model_cfg: ModelConfig,
    seqs: list[SweepSequence],
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: Path | None = None,
    progress: Callable[[dict], None] | None = None,
    cache: list[tuple[ModelInputs, Targets] | None] | None = None,
) -> TrainResult:
    """Train from the seeded initialization; one frame per optimizer step.

    With ``out_dir`` set, checkpoints are written every
    ``checkpoint_interval`` steps (the initialization included) and the loss
    trace goes to ``loss.csv``.
    """
    loss_cfg = loss_cfg or LossConfig()
    if train_cfg.iterations > 0 and not seqs:
        raise ValueError("cannot train on an empty dataset")
    net = LaserFlowNet(replace(model_cfg, seed=train_cfg.seed))
    result = TrainResult(net)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(k: int) -> None:
        if out_dir is None:
            return
        path = out_dir / f"checkpoint_{k:06d}.json"
        io.save_checkpoint(net.params, path, k, {"model": net.cfg.to_dict()})
        result.checkpoints.append(path)

    checkpoint(0)
    if cache is None:
        # frames are prepared on first visit so short runs skip unused scenes
        cache = [None] * len(seqs) if train_cfg.iterations else []
    rng = np.random.default_rng(train_cfg.seed)
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    state = nc.AdamState()
    flat = net.flat_params()
    horizon = net.cfg.horizon
    t0 = time.perf_counter()
    for k in range(train_cfg.iterations):
        if pos >= len(order):
            order = rng.permutation(len(cache))
            pos = 0
        idx = order[pos]
        pos += 1
        if cache[idx] is None:
            seq = seqs[idx]
            cache[idx] = (prepare_inputs(seq.sweeps, seq.raster, net.cfg), build_targets(seq))
        inputs, targets = cache[idx]
        cur = CurriculumState(k, train_cfg.iterations, loss_cfg.beta)
        raw, fcache = net.forward(inputs)
        step, dy = loss_and_grad(raw, inputs, targets, net.cfg, loss_cfg, cur)
        if not math.isfinite(step.total):
            raise NonFiniteLossError(k)
        grads = net.backward(dy, fcache, inputs)
        lr = train_cfg.lr_at(k)
        try:
            nc.adam_step(flat, nc.flatten_params(grads), state, lr)
        except nc.NonFiniteGradientError as err:
            raise NonFiniteLossError(k, f"gradient in {err.layer}") from err
        row = _curriculum_row(k, horizon, loss_cfg, cur)
        row.update({"lr": lr, "L_total": step.total, "L_cls": step.cls, "L_reg": step.reg})
        result.history.append(row)
        if progress is not None:
            progress(row)
        if (k + 1) % train_cfg.checkpoint_interval == 0 or k + 1 == train_cfg.iterations:
            checkpoint(k + 1)
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_loss_csv(result.history, out_dir / "loss.csv")
    return result


def load_net(path: Path) -> LaserFlowNet:
    params, header = io.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    net = LaserFlowNet(cfg)
    if set(params) != set(net.params):
        raise io.FormatError("checkpoint layers do not match the model configuration")
    for name, p in params.items():
        if p.kernel.shape != net.params[name].kernel.shape:
            raise io.FormatError(f"layer {name} has shape {p.kernel.shape}, expected {net.params[name].kernel.shape}")
    net.params = params
    return net


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass(frozen=True)
class EvalProtocol:
    ap_ious: tuple[float, ...] = (0.7, 0.5)
    recall_point: float = 0.8
    l2_iou: float = 0.5
    l2_times: tuple[float, ...] = (0.0, 1.0, 3.0)
    roi_half_x: float = 72.0
    roi_half_y: float = 40.0
    min_points: int = 5
    score_threshold: float = 0.3
    bandwidth: float = 1.0
    nms_iou: float = 0.1
    min_support: int = 2

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalProtocol":
        d = dict(d)
        for key in ("ap_ious", "l2_times"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def detect(net: LaserFlowNet, inputs: ModelInputs, protocol: EvalProtocol) -> list[Detection]:
    raw, _ = net.forward(inputs)
    return detections_from_raw(raw, inputs, net.cfg, protocol)


def detections_from_raw(raw: np.ndarray, inputs: ModelInputs, cfg: ModelConfig,
                        protocol: EvalProtocol) -> list[Detection]:
    rows, cols = np.nonzero(inputs.valid)
    if rows.size == 0:
        return []
    pred = cfg.layout.split(raw[rows, cols])
    decoded = decode_trajectories(inputs.points[rows, cols], inputs.theta[rows, cols], pred)
    dets = []
    for c in range(1, cfg.num_classes):
        dets += mean_shift_cluster(decoded["centers"][:, 0], decoded, pred.class_probs[:, c], protocol.bandwidth,
                                   protocol.score_threshold, class_id=c)
    # lone confident pixels on clutter are not objects
    dets = [d for d in dets if d.num_points >= protocol.min_support]
    return non_max_suppression(dets, protocol.nms_iou)


def frame_ground_truth(seq: SweepSequence, protocol: EvalProtocol) -> tuple[list[BoxTrajectory], list[BoxTrajectory]]:
    """Evaluated GT (enough visible points) and ignore regions (the rest), RoI-filtered."""
    counts = seq.points_per_actor()
    keep, ignore = [], []
    for i, traj in enumerate(seq.trajectories):
        if seq.actor_classes[i] <= 0:
            continue
        (keep if counts[i] >= protocol.min_points else ignore).append(traj)
    roi = (protocol.roi_half_x, protocol.roi_half_y)
    return roi_filter(keep, *roi), roi_filter(ignore, *roi)


def oracle_detections(gts: list[BoxTrajectory]) -> list[Detection]:
    return [Detection(1.0, 1, g, 1) for g in gts]


def step_indices(times: tuple[float, ...], step_dt: float, steps: int | None = None) -> list[int]:
    idx = [int(round(t / step_dt)) for t in times]
    if steps is not None and any(i >= steps for i in idx):
        raise ValueError(f"evaluation times {times} reach beyond the {steps}-step horizon")
    return idx


def evaluate_detections(dets: list[list[Detection]], gts: list[list[BoxTrajectory]],
                        ignore: list[list[BoxTrajectory]], protocol: EvalProtocol, step_dt: float = 0.5) -> dict:
    """AP at each IoU, L2 at the recall point and calibration for one detection set."""
    dets = [roi_filter(d, protocol.roi_half_x, protocol.roi_half_y) for d in dets]
    out: dict = {"num_frames": len(gts), "num_gt": sum(len(g) for g in gts),
                 "num_detections": sum(len(d) for d in dets)}
    out["ap"] = {f"{iou:g}": average_precision(dets, gts, iou, ignore) for iou in protocol.ap_ious}
    steps = next((len(g[0].centers) for g in gts if g), None)
    idx = step_indices(protocol.l2_times, step_dt, steps)
    try:
        l2 = l2_at_recall(dets, gts, protocol.recall_point, protocol.l2_iou, ignore)
        out["l2_cm"] = {f"{t:g}": float(l2.errors_cm[i]) for t, i in zip(protocol.l2_times, idx)}
        out["l2_threshold"] = l2.threshold
        out["l2_error"] = None
        pairs = [(dets[f][i], gts[f][j]) for f, i, j in l2.pairs]
    except RecallUnreachableError as err:
        out["l2_cm"] = None
        out["l2_threshold"] = None
        out["l2_error"] = str(err)
        pairs = []
    pairs = [(d, g) for d, g in pairs if d.trajectory.b_along is not None]
    curves = track_calibration(pairs)
    out["calibration"] = {f"{t}_{dim}": {"expected": c.expected.tolist(), "observed": c.observed.tolist(),
                                          "count": c.count, "max_deviation": c.max_deviation}
                          for (t, dim), c in curves.items()}
    return out


def pixel_center_errors(net: LaserFlowNet, data: list[tuple[ModelInputs, Targets]]) -> np.ndarray:
    """Per-step decoded center error on on-object pixels (object-weighted mean, meters)."""
    total = np.zeros(net.cfg.horizon + 1)
    weight = 0.0
    for inputs, targets in data:
        if not len(targets.rows):
            continue
        raw, _ = net.forward(inputs)
        pred = net.cfg.layout.split(raw[targets.rows, targets.cols])
        dec = decode_trajectories(inputs.points[targets.rows, targets.cols],
                                  inputs.theta[targets.rows, targets.cols], pred)
        err = np.linalg.norm(dec["centers"] - targets.boxes.centers, axis=-1)
        total += targets.pixel_weight @ err
        weight += targets.pixel_weight.sum()
    return total / max(weight, 1e-12)


def evaluate(net: LaserFlowNet, seqs: list[SweepSequence], protocol: EvalProtocol | None = None,
             data: list[tuple[ModelInputs, Targets]] | None = None) -> tuple[dict, list[list[Detection]]]:
    protocol = protocol or EvalProtocol()
    if data is None:
        data = [(prepare_inputs(s.sweeps, s.raster, net.cfg), build_targets(s)) for s in seqs]
    gts, ignore = zip(*[frame_ground_truth(s, protocol) for s in seqs]) if seqs else ((), ())
    t0 = time.perf_counter()
    dets = [detect(net, inputs, protocol) for inputs, _ in data]
    elapsed = time.perf_counter() - t0
    step_dt = seqs[0].step_dt if seqs else 0.5
    metrics = evaluate_detections(dets, list(gts), list(ignore), protocol, step_dt)
    pix = pixel_center_errors(net, data)
    idx = step_indices(protocol.l2_times, step_dt)
    metrics["pixel_l2_cm"] = {f"{t:g}": 100.0 * float(pix[i]) for t, i in zip(protocol.l2_times, idx)}
    metrics["frames_per_second"] = len(data) / elapsed if elapsed > 0 else float("inf")
    return metrics, dets


# ---------------------------------------------------------------------------
# ablations

ABLATIONS: dict[str, tuple[str, dict]] = {
    "proposed": ("proposed", {}),
    "early_fusion": ("early_fusion", {}),
    "no_transformer": ("no_transformer", {}),
    "global_ego": ("global_ego", {}),
    "no_uncertainty": ("proposed", {"regression": "l1"}),
    "weight_curriculum": ("proposed", {"curriculum": "weight"}),
    "no_curriculum": ("proposed", {"curriculum": "none"}),
}
DEFAULT_ABLATIONS = ("proposed", "early_fusion", "no_transformer", "global_ego", "no_uncertainty",
                     "weight_curriculum")


def ablation_setup(name: str, model_cfg: ModelConfig, loss_cfg: LossConfig) -> tuple[ModelConfig, LossConfig]:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    variant, overrides = ABLATIONS[name]
    return replace(model_cfg, variant=variant), replace(loss_cfg, **overrides)


def run_ablation(
    train_seqs: list[SweepSequence],
    val_seqs: list[SweepSequence],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    variants: tuple[str, ...] = DEFAULT_ABLATIONS,
    seeds: tuple[int, ...] = (0,),
    protocol: EvalProtocol | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train and evaluate each variant for each seed; one row per (variant, seed)."""
    protocol = protocol or EvalProtocol()
    rows = []
    for name in variants:
        mcfg, lcfg = ablation_setup(name, model_cfg, loss_cfg)
        for seed in seeds:
            res = train(mcfg, train_seqs, replace(train_cfg, seed=seed), lcfg)
            metrics, _ = evaluate(res.net, val_seqs, protocol)
            row = {"variant": name, "seed": seed}
            for iou, ap in metrics["ap"].items():
                row[f"AP@{iou}"] = 100.0 * ap
            for t in protocol.l2_times:
                key = f"{t:g}"
                row[f"L2@{key}s"] = metrics["l2_cm"][key] if metrics["l2_cm"] else float("nan")
                row[f"pixel_L2@{key}s"] = metrics["pixel_l2_cm"][key]
            row["train_seconds"] = res.seconds
            rows.append(row)
            if progress is not None:
                progress(f"{name} seed={seed}: " + ", ".join(
                    f"{k}={v:.2f}" for k, v in row.items() if isinstance(v, float)))
    return rows


def summarize_ablation(rows: list[dict], horizon_key: str = "3") -> tuple[list[dict], list[str]]:
    """Seed-averaged rows plus the variants that beat the proposed model at the far horizon.

    Ordering uses detection L2 when every variant reaches the recall point
    and per-pixel L2 otherwise.
    """
    names = list(dict.fromkeys(r["variant"] for r in rows))
    metric_keys = [k for k in rows[0] if k not in ("variant", "seed")] if rows else []
    summary = []
    for name in names:
        sel = [r for r in rows if r["variant"] == name]
        avg = {"variant": name, "seeds": len(sel)}
        for k in metric_keys:
            avg[k] = float(np.mean([r[k] for r in sel]))
        summary.append(avg)
    det_key, pix_key = f"L2@{horizon_key}s", f"pixel_L2@{horizon_key}s"
    key = det_key if all(math.isfinite(r.get(det_key, float("nan"))) for r in summary) else pix_key
    flagged = []
    base = next((r for r in summary if r["variant"] == "proposed"), None)
    for r in summary:
        r["ordering_metric"] = key
        if base is not None and r["variant"] != "proposed" and base[key] > r[key]:
            flagged.append(r["variant"])
    for r in summary:
        r["violates_ordering"] = r["variant"] in flagged
    return summary, flagged
