import logging
from collections.abc import Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from autodiff.tensor import Tensor, make_node
from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

ActivationKind = Literal["tanh", "leaky_relu", "sigmoid", "softmax_channels"]


class ConvSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    kernel: tuple[int, int] = (3, 3)
    stride: int = Field(default=1, ge=1)
    dilation: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    has_bias: bool = True

    @field_validator("kernel")
    @classmethod
    def _check_kernel(cls, value: tuple[int, int]) -> tuple[int, int]:
        if value[0] < 1 or value[1] < 1:
            raise ValueError(f"kernel must be >= 1, got {value}")
        return value

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return oh, ow


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def _require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ConfigurationError(f"{op}: expected (n, c, h, w) tensor, got shape {x.shape}")


def _tap_slices(i: int, j: int, spec: ConvSpec, oh: int, ow: int) -> tuple[slice, slice]:
    s, d = spec.stride, spec.dilation
    rows = slice(i * d, i * d + s * (oh - 1) + 1, s)
    cols = slice(j * d, j * d + s * (ow - 1) + 1, s)
    return rows, cols


def conv2d(
    x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None
) -> Tensor:
    _require_rank4(x, "conv2d")
    n, c, h, w = x.shape
    kh, kw = spec.kernel
    if c != spec.in_channels:
        raise ConfigurationError(
            f"conv2d: input has {c} channels, spec expects {spec.in_channels}"
        )
    expected = (spec.out_channels, spec.in_channels, kh, kw)
    if weight.shape != expected:
        raise ConfigurationError(f"conv2d: weight shape {weight.shape} != {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigurationError(
            f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)"
        )
    if spec.has_bias and bias is None:
        raise ConfigurationError("conv2d: spec declares a bias but none was given")
    oh, ow = spec.output_size(h, w)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"conv2d: input {h}x{w} too small for {spec}")

    p = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _tap_slices(i, j, spec, oh, ow)
            cols[:, :, i, j] = xp[:, :, rs, cs]
    wdata = weight.data.astype(x.data.dtype, copy=False)
    out = np.tensordot(wdata, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.astype(x.data.dtype, copy=False)[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(wdata, g, axes=([0], [1]))  # (c, kh, kw, n, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _tap_slices(i, j, spec, oh, ow)
                dxp[:, :, rs, cs] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        grads: list[np.ndarray | None] = [dx, dw.astype(weight.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        return grads

    parents = [x, weight] if bias is None else [x, weight, bias]
    return make_node(out, parents, _backward, "conv2d")


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: Literal["train", "infer"],
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    _require_rank4(x, "batch_norm")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ConfigurationError("batch_norm: zero-size batch")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigurationError(
            f"batch_norm: scale/shift must have length {c}, got {scale.shape}/{shift.shape}"
        )
    dtype = x.data.dtype
    gamma = scale.data.astype(dtype, copy=False)[None, :, None, None]
    beta = shift.data.astype(dtype, copy=False)[None, :, None, None]

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(dtype, copy=False)
        var = running_var.astype(dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)[None, :, None, None]
    xhat = (x.data - mean.astype(dtype)[None, :, None, None]) * inv_std
    out = gamma * xhat + beta
    m = n * h * w

    def _backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if mode == "train":
            dx = (
                inv_std
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma.astype(scale.dtype), dbeta.astype(shift.dtype)

    return make_node(out, [x, scale, shift], _backward, "batch_norm")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def activation(x: Tensor, kind: ActivationKind) -> Tensor:
    v = x.data
    if kind == "tanh":
        out = np.tanh(v)

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * (1.0 - out * out),)

    elif kind == "sigmoid":
        out = _sigmoid(v)

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * out * (1.0 - out),)

    elif kind == "leaky_relu":
        slope = np.where(v > 0, 1.0, LEAKY_SLOPE).astype(v.dtype)
        out = v * slope

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * slope,)

    elif kind == "softmax_channels":
        _require_rank4(x, "softmax_channels")
        if x.shape[1] < 2:
            raise ConfigurationError("softmax_channels needs at least 2 channels")
        z = np.exp(v - v.max(axis=1, keepdims=True))
        out = z / z.sum(axis=1, keepdims=True)

        def _backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return make_node(out, [x], _backward, kind)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _require_rank4(x, "upsample_nearest")
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return make_node(x.data.copy(), [x], lambda g: (g,), "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_node(out, [x], _backward, "upsample_nearest")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    _require_rank4(x, "avg_pool")
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ConfigurationError(f"avg_pool factor {factor} must divide {h}x{w}")
    oh, ow = h // factor, w // factor
    out = x.data.reshape(n, c, oh, factor, ow, factor).mean(axis=(3, 5))

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        spread = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (spread / (factor * factor),)

    return make_node(out, [x], _backward, "avg_pool")


def channel_gate(x: Tensor, gate_params: Tensor) -> Tensor:
    _require_rank4(x, "channel_gate")
    c = x.shape[1]
    if gate_params.shape != (c,):
        raise ConfigurationError(
            f"channel_gate: gate shape {gate_params.shape} for {c} input channels"
        )
    t = np.tanh(gate_params.data.astype(x.data.dtype, copy=False))
    out = x.data * t[None, :, None, None]

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dx = g * t[None, :, None, None]
        dgate = (g * x.data).sum(axis=(0, 2, 3)) * (1.0 - t * t)
        return dx, dgate.astype(gate_params.dtype)

    return make_node(out, [x, gate_params], _backward, "channel_gate")


def merge(inputs: Sequence[Tensor], mode: Literal["add", "concat_channels"]) -> Tensor:
    if not inputs:
        raise ConfigurationError("merge needs at least one input")
    if mode == "add":
        shape = inputs[0].shape
        for t in inputs[1:]:
            if t.shape != shape:
                raise ConfigurationError(f"merge add: shape {t.shape} != {shape}")
        out = inputs[0].data
        for t in inputs[1:]:
            out = out + t.data

        def _backward(g: np.ndarray) -> list[np.ndarray]:
            return [g for _ in inputs]

        return make_node(np.asarray(out), list(inputs), _backward, "merge_add")

    if mode == "concat_channels":
        for t in inputs:
            _require_rank4(t, "merge concat")
        n, _, h, w = inputs[0].shape
        for t in inputs[1:]:
            if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
                raise ConfigurationError(
                    f"merge concat: shape {t.shape} incompatible with {inputs[0].shape}"
                )
        sizes = [t.shape[1] for t in inputs]
        out = np.concatenate([t.data for t in inputs], axis=1)
        bounds = np.cumsum(sizes)[:-1]

        def _backward(g: np.ndarray) -> list[np.ndarray]:
            return np.split(g, bounds, axis=1)

        return make_node(out, list(inputs), _backward, "merge_concat")

    raise ConfigurationError(f"unknown merge mode {mode!r}")


def gather_cells(
    x: Tensor, batch_idx: np.ndarray, rows: np.ndarray, cols: np.ndarray
) -> Tensor:
    """Feature vectors of selected grid cells as an (M, c, 1, 1) tensor."""
    _require_rank4(x, "gather_cells")
    n, c, h, w = x.shape
    b = np.asarray(batch_idx, dtype=np.int64)
    i = np.asarray(rows, dtype=np.int64)
    j = np.asarray(cols, dtype=np.int64)
    if b.size:
        in_range = (b.min() >= 0) & (i.min() >= 0) & (j.min() >= 0)
        in_range &= (b.max() < n) & (i.max() < h) & (j.max() < w)
        if not in_range:
            raise ConfigurationError("gather_cells: cell index out of range")
    nhwc = x.data.transpose(0, 2, 3, 1)
    out = nhwc[b, i, j].reshape(b.size, c, 1, 1)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        dnhwc = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(dnhwc, (b, i, j), g.reshape(b.size, c))
        return (dnhwc.transpose(0, 3, 1, 2),)

    return make_node(np.ascontiguousarray(out), [x], _backward, "gather_cells")


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(
        np.asarray(x.data.sum()), [x], lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return make_node(x.data * factor, [x], lambda g: (g * factor,), "scale")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with constant weights of the same shape."""
    wts = np.asarray(weights, dtype=x.data.dtype)
    if wts.shape != x.shape:
        raise ConfigurationError(f"weighted_sum: weights {wts.shape} != {x.shape}")
    return make_node(
        np.asarray((x.data * wts).sum()), [x], lambda g: (g * wts,), "weighted_sum"
    )
