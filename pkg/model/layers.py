import logging
from collections.abc import Iterator
from typing import Any

import numpy as np

from autodiff.ops import (
    BN_MOMENTUM,
    ConvSpec,
    activation,
    batch_norm,
    channel_gate,
    conv2d,
)
from autodiff.tensor import Parameter, Tensor
from core.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Module:
    """Container of parameters, buffers and child modules, walked in definition order."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, Any]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{idx}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{idx}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ConfigurationError(
                f"state dict mismatch: missing {sorted(missing)[:5]}, "
                f"unexpected {sorted(unexpected)[:5]}"
            )
        for name, p in params.items():
            p.data = _fit_shape(state[name], p.data.shape, name).astype(np.float32)
        for name, buf in buffers.items():
            buf[...] = _fit_shape(state[name], buf.shape, name)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError


def _fit_shape(arr: np.ndarray, shape: tuple[int, ...], name: str) -> np.ndarray:
    if arr.size != int(np.prod(shape)):
        raise ConfigurationError(f"{name}: stored {arr.shape} does not fit {shape}")
    return np.asarray(arr).reshape(shape)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self._spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Parameter(
            he_normal(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in)
        )
        self.bias = Parameter(np.zeros(spec.out_channels, np.float32)) if spec.has_bias else None

    @property
    def spec(self) -> ConvSpec:
        return self._spec

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self._spec, self.weight, self.bias)


def conv3x3(
    cin: int, cout: int, rng: np.random.Generator, stride: int = 1, dilation: int = 1,
    bias: bool = True,
) -> Conv2d:
    spec = ConvSpec(
        in_channels=cin, out_channels=cout, kernel=(3, 3), stride=stride,
        dilation=dilation, padding=dilation, has_bias=bias,
    )
    return Conv2d(spec, rng)


def conv1x1(
    cin: int, cout: int, rng: np.random.Generator, stride: int = 1, bias: bool = True
) -> Conv2d:
    spec = ConvSpec(
        in_channels=cin, out_channels=cout, kernel=(1, 1), stride=stride, has_bias=bias
    )
    return Conv2d(spec, rng)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.scale = Parameter(np.ones(channels, np.float32))
        self.shift = Parameter(np.zeros(channels, np.float32))
        self._momentum = momentum
        self._buffers = {
            "running_mean": np.zeros(channels, np.float32),
            "running_var": np.ones(channels, np.float32),
        }

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.scale,
            self.shift,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            mode="train" if self.training else "infer",
            momentum=self._momentum,
        )


class ChannelGate(Module):
    def __init__(self, channels: int, init: float = 1.0):
        self.gate = Parameter(np.full(channels, init, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return channel_gate(x, self.gate)


def leaky(x: Tensor) -> Tensor:
    return activation(x, "leaky_relu")
