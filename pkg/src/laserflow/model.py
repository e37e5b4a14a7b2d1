"""Multi-sweep range-view network with hand-written backward passes.

Pipeline for the default variant::

    sweeps --shared encoder--> features --(+ ego features)--> transformer
           --warp into current raster--> concat (+ hole masks) --> U-Net backbone --> head

Every block keeps the caches it needs and exposes an explicit backward.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from laserflow import netcore as nc
from laserflow.geometry import (
    BASE_CHANNELS,
    RANGE,
    Pose,
    RangeImage,
    RasterConfig,
    WarpMap,
    compute_warp_mapping,
    transform_point,
    warp_range_image,
)
from laserflow.trajectory import HeadLayout

VARIANTS = ("proposed", "early_fusion", "no_transformer", "global_ego")


@dataclass(frozen=True)
class ModelConfig:
    num_sweeps: int = 5
    num_classes: int = 2
    horizon: int = 6
    encoder_channels: int = 8
    backbone_channels: int = 16
    variant: str = "proposed"
    input_channels: tuple[str, ...] = BASE_CHANNELS
    range_scale: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.horizon < 1 or self.num_sweeps < 1 or self.num_classes < 2:
            raise ValueError("invalid model dimensions")
        object.__setattr__(self, "input_channels", tuple(self.input_channels))

    @property
    def layout(self) -> HeadLayout:
        return HeadLayout(self.num_classes, self.horizon)

    @property
    def output_channels(self) -> int:
        return self.layout.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_channels"] = list(self.input_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def ego_motion_delta(p0: Pose, ps: Pose) -> np.ndarray:
    """Origin of sweep ``s``'s sensor expressed in the current sensor frame."""
    return transform_point(ps, p0, np.zeros(3))


def rotate_ego_feature(delta: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rotate the planar ego displacement into the frame of azimuth ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = delta[0], delta[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], -1)


def ego_feature_raster(delta: np.ndarray, cfg: RasterConfig, rotated: bool = True) -> np.ndarray:
    """(H, W, 3) raster of (delta_x, delta_y, Delta_z), constant down each column."""
    theta = cfg.column_azimuth()
    if rotated:
        planar = rotate_ego_feature(delta, theta)
    else:
        planar = np.broadcast_to(np.asarray(delta[:2], dtype=np.float64), (cfg.width, 2))
    cols = np.concatenate([planar, np.full((cfg.width, 1), delta[2])], -1)
    return np.broadcast_to(cols[None], (cfg.height, cfg.width, 3)).copy()


@dataclass
class ModelInputs:
    """Parameter-independent tensors derived from one sweep sequence."""

    sweeps: np.ndarray  # (N, H, W, Cin)
    ego: np.ndarray | None  # (N, H, W, 3)
    warps: list[WarpMap]
    points: np.ndarray  # (H, W, 2) BEV of current returns
    theta: np.ndarray  # (H, W) azimuth of current returns
    valid: np.ndarray  # (H, W)


def image_features(img: RangeImage, cfg: ModelConfig) -> np.ndarray:
    feats = []
    for name in cfg.input_channels:
        ch = img.channel(name).astype(np.float64)
        feats.append(ch * cfg.range_scale if name == RANGE else ch)
    return np.stack(feats, -1)


def prepare_inputs(sweeps: list[RangeImage], raster: RasterConfig, cfg: ModelConfig,
                   dtype=np.float32) -> ModelInputs:
    if len(sweeps) != cfg.num_sweeps:
        raise ValueError(f"model expects {cfg.num_sweeps} sweeps, got {len(sweeps)}")
    current = sweeps[-1]
    if current.shape != raster.shape:
        raise ValueError(f"raster size {current.shape} does not match config {raster.shape}")
    for img in sweeps:
        if img.shape != raster.shape:
            raise ValueError("sweeps differ in raster size")
    pts = current.points_or_beams(raster)
    points = pts[..., :2]
    theta = np.arctan2(points[..., 1], points[..., 0])
    theta = np.where(current.valid, theta, raster.column_azimuth()[None, :])

    if cfg.variant == "early_fusion":
        rendered = [warp_range_image(img, current.pose, raster) for img in sweeps[:-1]] + [current]
        x = np.concatenate([image_features(img, cfg) for img in rendered], -1)[None]
        return ModelInputs(x.astype(dtype), None, [], points, theta, current.valid)

    x = np.stack([image_features(img, cfg) for img in sweeps]).astype(dtype)
    warps = [compute_warp_mapping(img, current.pose, raster) for img in sweeps[:-1]]
    ego = None
    if cfg.variant != "no_transformer":
        ego = np.stack([
            ego_feature_raster(ego_motion_delta(current.pose, img.pose), raster, cfg.variant != "global_ego")
            for img in sweeps
        ]).astype(dtype)
    return ModelInputs(x, ego, warps, points, theta, current.valid)


# ---------------------------------------------------------------------------
# building blocks


def _conv(params, name, x, stride=1):
    return nc.conv2d_forward(x, params[name], stride)


def _res_forward(params, prefix, x, stride=1):
    """conv3x3(stride) -> relu -> conv3x3 -> + skip -> relu."""
    h1, c1 = _conv(params, f"{prefix}.conv1", x, stride)
    a1, m1 = nc.relu_forward(h1)
    h2, c2 = _conv(params, f"{prefix}.conv2", a1)
    if f"{prefix}.skip" in params:
        sk, cs = _conv(params, f"{prefix}.skip", x, stride)
    else:
        sk, cs = x, None
    y, m2 = nc.relu_forward(nc.residual_add(h2, sk))
    return y, (c1, m1, c2, cs, m2)


def _res_backward(grads, prefix, dy, cache):
    c1, m1, c2, cs, m2 = cache
    dsum = nc.relu_backward(dy, m2)
    dh2, dskip = nc.residual_add_backward(dsum)
    da1, grads[f"{prefix}.conv2"] = nc.conv2d_backward(dh2, c2)
    dx, grads[f"{prefix}.conv1"] = nc.conv2d_backward(nc.relu_backward(da1, m1), c1)
    if cs is not None:
        dxs, grads[f"{prefix}.skip"] = nc.conv2d_backward(dskip, cs)
        dx = dx + dxs
    else:
        dx = dx + dskip
    return dx


def _conv_relu_forward(params, name, x, stride=1):
    h, c = _conv(params, name, x, stride)
    y, m = nc.relu_forward(h)
    return y, (c, m)


def _conv_relu_backward(grads, name, dy, cache, input_grad=True):
    c, m = cache
    dx, grads[name] = nc.conv2d_backward(nc.relu_backward(dy, m), c, input_grad)
    return dx


def _warp_forward(feat: np.ndarray, wmap: WarpMap):
    out = np.zeros_like(feat)
    mask = np.zeros(feat.shape[:2] + (1,), dtype=feat.dtype)
    src = wmap.mapped
    out[wmap.rows[src], wmap.cols[src]] = feat[src]
    mask[wmap.rows[src], wmap.cols[src]] = 1
    return out, mask


def _warp_backward(dout: np.ndarray, wmap: WarpMap) -> np.ndarray:
    dfeat = np.zeros_like(dout)
    src = wmap.mapped
    dfeat[src] = dout[wmap.rows[src], wmap.cols[src]]
    return dfeat


class LaserFlowNet:
    """Parameters plus forward/backward for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, nc.LayerParams] = {}
        rng = np.random.default_rng(cfg.seed)
        e, b = cfg.encoder_channels, cfg.backbone_channels
        cin = len(cfg.input_channels)
        s1 = cfg.num_sweeps

        def add(name, kh, kw, ci, co, gain=1.0):
            self.params[name] = nc.init_conv(rng, kh, kw, ci, co, gain, dtype)

        enc_in = cin * s1 if cfg.variant == "early_fusion" else cin
        add("encoder.stem", 3, 3, enc_in, e)
        add("encoder.res.conv1", 3, 3, e, e)
        add("encoder.res.conv2", 3, 3, e, e, 0.5)
        if cfg.variant in ("proposed", "global_ego"):
            add("transformer.conv1", 3, 3, e + 3, e)
            add("transformer.conv2", 3, 3, e, e, 0.5)
        fused = e if cfg.variant == "early_fusion" else s1 * e + (s1 - 1)
        add("backbone.stem", 3, 3, fused, b)
        add("backbone.res1.conv1", 3, 3, b, b)
        add("backbone.res1.conv2", 3, 3, b, b, 0.5)
        for lvl in (2, 3):
            add(f"backbone.down{lvl}.conv1", 3, 3, b, b)
            add(f"backbone.down{lvl}.conv2", 3, 3, b, b, 0.5)
            add(f"backbone.down{lvl}.skip", 1, 1, b, b)
            add(f"backbone.mid{lvl}.conv1", 3, 3, b, b)
            add(f"backbone.mid{lvl}.conv2", 3, 3, b, b, 0.5)
        for lvl in (2, 1):
            add(f"backbone.up{lvl}.fuse", 3, 3, 2 * b, b)
            add(f"backbone.up{lvl}.res.conv1", 3, 3, b, b)
            add(f"backbone.up{lvl}.res.conv2", 3, 3, b, b, 0.5)
        add("head", 1, 1, b, cfg.output_channels, 0.1)
        self._init_head_bias()

    def _init_head_bias(self) -> None:
        lay = self.cfg.layout
        bias = np.zeros(lay.channels)
        bias[0] = math.log(9.0 * (lay.num_classes - 1))  # background prior 0.9
        bias[lay.box_start] = math.log(4.5)
        bias[lay.box_start + 1] = math.log(2.0)
        steps = bias[lay.box_start + 2:].reshape(lay.horizon + 1, lay.PER_STEP)
        steps[:, 2] = 1.0
        self.params["head"].bias[:] = bias

    # -- parameter plumbing ---------------------------------------------------

    def flat_params(self) -> dict[str, np.ndarray]:
        return nc.flatten_params(self.params)

    def layer_names(self) -> list[str]:
        return list(self.params)

    def astype(self, dtype) -> "LaserFlowNet":
        other = LaserFlowNet.__new__(LaserFlowNet)
        other.cfg, other.dtype = self.cfg, dtype
        other.params = {k: nc.LayerParams(p.kernel.astype(dtype), p.bias.astype(dtype)) for k, p in self.params.items()}
        return other

    # -- forward / backward ---------------------------------------------------

    def forward(self, inputs: ModelInputs) -> tuple[np.ndarray, dict]:
        """Raw (H, W, C + 2 + 6(T+1)) prediction raster and the backward cache."""
        p = self.params
        cfg = self.cfg
        x = inputs.sweeps.astype(self.dtype, copy=False)
        cache: dict = {}
        f, cache["enc.stem"] = _conv_relu_forward(p, "encoder.stem", x)
        f, cache["enc.res"] = _res_forward(p, "encoder.res", f)

        if cfg.variant == "early_fusion":
            fused = f[0]
        else:
            if cfg.variant in ("proposed", "global_ego"):
                tin = nc.concat_channels(f, inputs.ego.astype(self.dtype, copy=False))
                g, cache["tr1"] = _conv_relu_forward(p, "transformer.conv1", tin)
                g, cache["tr2"] = _conv(p, "transformer.conv2", g)
            else:
                g = f
            parts, masks = [], []
            for s, wmap in enumerate(inputs.warps):
                wf, wm = _warp_forward(g[s], wmap)
                parts.append(wf)
                masks.append(wm)
            parts.append(g[-1])
            fused = nc.concat_channels(*parts, *masks)
        y, out_cache = self._backbone_forward(fused)
        cache.update(out_cache)
        return y, cache

    def _backbone_forward(self, x):
        p = self.params
        cache = {}
        h, cache["bb.stem"] = _conv_relu_forward(p, "backbone.stem", x)
        l1, cache["bb.res1"] = _res_forward(p, "backbone.res1", h)
        d2, cache["bb.down2"] = _res_forward(p, "backbone.down2", l1, stride=2)
        l2, cache["bb.mid2"] = _res_forward(p, "backbone.mid2", d2)
        d3, cache["bb.down3"] = _res_forward(p, "backbone.down3", l2, stride=2)
        l3, cache["bb.mid3"] = _res_forward(p, "backbone.mid3", d3)
        u = nc.column_upsample_forward(l3, l2.shape[-2])
        cache["bb.up2.widths"] = (l3.shape[-2], u.shape[-1])
        u, cache["bb.up2.fuse"] = _conv_relu_forward(p, "backbone.up2.fuse", nc.concat_channels(u, l2))
        u, cache["bb.up2.res"] = _res_forward(p, "backbone.up2.res", u)
        v = nc.column_upsample_forward(u, l1.shape[-2])
        cache["bb.up1.widths"] = (u.shape[-2], v.shape[-1])
        v, cache["bb.up1.fuse"] = _conv_relu_forward(p, "backbone.up1.fuse", nc.concat_channels(v, l1))
        v, cache["bb.up1.res"] = _res_forward(p, "backbone.up1.res", v)
        y, cache["head"] = _conv(p, "head", v)
        return y, cache

    def _backbone_backward(self, grads, dy, cache):
        dv, grads["head"] = nc.conv2d_backward(dy, cache["head"])
        dv = _res_backward(grads, "backbone.up1.res", dv, cache["bb.up1.res"])
        dcat = _conv_relu_backward(grads, "backbone.up1.fuse", dv, cache["bb.up1.fuse"])
        in_w, c_up = cache["bb.up1.widths"]
        dup, dl1 = nc.concat_channels_backward(dcat, [c_up, dcat.shape[-1] - c_up])
        du = nc.column_upsample_backward(dup, in_w)
        du = _res_backward(grads, "backbone.up2.res", du, cache["bb.up2.res"])
        dcat = _conv_relu_backward(grads, "backbone.up2.fuse", du, cache["bb.up2.fuse"])
        in_w, c_up = cache["bb.up2.widths"]
        dup, dl2 = nc.concat_channels_backward(dcat, [c_up, dcat.shape[-1] - c_up])
        dl3 = nc.column_upsample_backward(dup, in_w)
        dd3 = _res_backward(grads, "backbone.mid3", dl3, cache["bb.mid3"])
        dl2 = dl2 + _res_backward(grads, "backbone.down3", dd3, cache["bb.down3"])
        dd2 = _res_backward(grads, "backbone.mid2", dl2, cache["bb.mid2"])
        dl1 = dl1 + _res_backward(grads, "backbone.down2", dd2, cache["bb.down2"])
        dh = _res_backward(grads, "backbone.res1", dl1, cache["bb.res1"])
        return _conv_relu_backward(grads, "backbone.stem", dh, cache["bb.stem"])

    def backward(self, dy: np.ndarray, cache: dict, inputs: ModelInputs) -> dict[str, nc.LayerParams]:
        """Parameter gradients for upstream gradient ``dy`` on the prediction raster."""
        if not cache:
            raise nc.MissingCacheError("backward called without a forward cache")
        cfg = self.cfg
        grads: dict[str, nc.LayerParams] = {}
        dfused = self._backbone_backward(grads, dy.astype(self.dtype, copy=False), cache)
        if cfg.variant == "early_fusion":
            df = dfused[None]
        else:
            e = cfg.encoder_channels
            n_prev = len(inputs.warps)
            dg = np.empty((n_prev + 1,) + dfused.shape[:2] + (e,), dtype=dfused.dtype)
            for s, wmap in enumerate(inputs.warps):
                dg[s] = _warp_backward(dfused[..., s * e:(s + 1) * e], wmap)
            dg[-1] = dfused[..., n_prev * e:(n_prev + 1) * e]
            if cfg.variant in ("proposed", "global_ego"):
                da, grads["transformer.conv2"] = nc.conv2d_backward(dg, cache["tr2"])
                dtin = _conv_relu_backward(grads, "transformer.conv1", da, cache["tr1"])
                df = dtin[..., :e]
            else:
                df = dg
        df = _res_backward(grads, "encoder.res", df, cache["enc.res"])
        # the raw sweeps need no gradient
        _conv_relu_backward(grads, "encoder.stem", df, cache["enc.stem"], input_grad=False)
        return grads

    def encode(self, inputs: ModelInputs) -> np.ndarray:
        """Per-sweep encoder features (N, H, W, E); used to check weight sharing."""
        f, _ = _conv_relu_forward(self.params, "encoder.stem", inputs.sweeps.astype(self.dtype, copy=False))
        f, _ = _res_forward(self.params, "encoder.res", f)
        return f
