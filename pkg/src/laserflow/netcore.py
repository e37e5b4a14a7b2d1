"""Minimal differentiable primitives for column-strided range-view CNNs.

Tensors are numpy arrays laid out (N, H, W, C); a 3-D (H, W, C) input is
treated as N = 1. Downsampling and upsampling only ever touch columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MissingCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.layer = name


@dataclass
class LayerParams:
    kernel: np.ndarray  # (kh, kw, Cin, Cout)
    bias: np.ndarray  # (Cout,)

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[3],):
            raise ValueError("kernel must be (kh, kw, Cin, Cout) with a matching bias")


def init_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int, gain: float = 1.0,
              dtype=np.float32) -> LayerParams:
    """Uniform fan-in initialization (He bound times ``gain``)."""
    bound = gain * math.sqrt(6.0 / (kh * kw * cin))
    kernel = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(dtype)
    return LayerParams(kernel, np.zeros(cout, dtype=dtype))


def _as4d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) or (H, W, C), got shape {x.shape}")
    return x, False


def _im2col(x4: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Zero-padded patches (N, H, ceil(W/stride), kh*kw*C), ordered (i, j, c)."""
    n, h, w, c = x4.shape
    wo = -(-w // stride)
    if kh == 1 and kw == 1:
        return x4[:, :, ::stride, :]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    # (N, H, W', C, kh, kw) window view -> contiguous (N, H, Wo, kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, wo, kh * kw * c)


def conv2d_forward(x: np.ndarray, params: LayerParams, column_stride: int = 1) -> tuple[np.ndarray, dict]:
    """Zero-padded 'same' convolution with an optional stride on columns only.

    Output width is ``ceil(W / column_stride)``; height is unchanged.
    """
    if column_stride not in (1, 2):
        raise ValueError("column stride must be 1 or 2")
    x4, squeeze = _as4d(x)
    kh, kw, cin, cout = params.kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("only odd kernel sizes are supported")
    n, h, w, c = x4.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    cols = _im2col(x4, kh, kw, column_stride)
    wo = cols.shape[2]
    y = (cols.reshape(-1, kh * kw * cin) @ params.kernel.reshape(kh * kw * cin, cout)).reshape(n, h, wo, cout)
    y += params.bias
    cache = {"cols": cols, "params": params, "stride": column_stride, "in_shape": x4.shape, "squeeze": squeeze}
    return (y[0] if squeeze else y), cache


def conv2d_backward(dy: np.ndarray, cache: dict | None, input_grad: bool = True) -> tuple[np.ndarray | None, LayerParams]:
    """Gradients w.r.t. the input and the layer parameters.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    if not cache:
        raise MissingCacheError("conv2d_backward called without a forward cache")
    params: LayerParams = cache["params"]
    kh, kw, cin, cout = params.kernel.shape
    n, h, w, _ = cache["in_shape"]
    s = cache["stride"]
    dy4, _ = _as4d(dy)
    dflat = dy4.reshape(-1, cout)
    cols = cache["cols"].reshape(-1, kh * kw * cin)
    dkernel = (cols.T @ dflat).reshape(params.kernel.shape)
    dbias = dflat.sum(0)
    if not input_grad:
        return None, LayerParams(dkernel, dbias)
    # input gradient = 'same' correlation of the column-dilated dy with the flipped, transposed kernel
    if s == 1:
        dil = dy4
    else:
        dil = np.zeros((n, h, w, cout), dtype=dy4.dtype)
        dil[:, :, ::s, :] = dy4
    flipped = params.kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    dcols = _im2col(dil, kh, kw, 1)
    dx = (dcols.reshape(-1, kh * kw * cout) @ flipped.reshape(kh * kw * cout, cin)).reshape(n, h, w, cin)
    if cache["squeeze"]:
        dx = dx[0]
    return dx, LayerParams(dkernel, dbias)


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def column_upsample_forward(x: np.ndarray, width: int | None = None) -> np.ndarray:
    """Nearest-neighbour x2 upsampling of columns, cropped to ``width`` if given."""
    y = np.repeat(x, 2, axis=-2)
    if width is not None:
        if width > y.shape[-2]:
            raise ValueError("target width exceeds upsampled width")
        y = y[..., :width, :]
    return y


def column_upsample_backward(dy: np.ndarray, in_width: int) -> np.ndarray:
    pad = 2 * in_width - dy.shape[-2]
    if pad:
        widths = [(0, 0)] * dy.ndim
        widths[-2] = (0, pad)
        dy = np.pad(dy, widths)
    return dy.reshape(dy.shape[:-2] + (in_width, 2, dy.shape[-1])).sum(-2)


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    shapes = {x.shape[:-1] for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"cannot concatenate tensors with shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def concat_channels_backward(dy: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(dy, np.cumsum(sizes)[:-1], axis=-1)


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return a + b


def residual_add_backward(dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dy, dy


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """In-place Adam update of ``params``; returns the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def flatten_params(layers: dict[str, LayerParams]) -> dict[str, np.ndarray]:
    """``{"enc.conv0": LayerParams}`` -> ``{"enc.conv0.kernel": ..., "enc.conv0.bias": ...}``."""
    out: dict[str, Any] = {}
    for name, p in layers.items():
        out[f"{name}.kernel"] = p.kernel
        out[f"{name}.bias"] = p.bias
    return out
