"""Parameter containers and the plain (non-KAN) layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from konvlina.core import ops
from konvlina.core.tensor import ConfigurationError, DimensionError, Parameter, Tensor


class Module:
    """Minimal parameter container.

    Parameters and sub-modules are discovered from instance attributes
    (including lists of modules) in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[prefix + name] = value.data
        for name, child in self.children():
            out.update(child.state_dict(f"{prefix}{name}."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                key = prefix + name
                if key not in state:
                    raise KeyError(f"missing tensor {key!r} in state")
                value.assign(state[key])
        for name, child in self.children():
            child.load_state_dict(state, f"{prefix}{name}.")


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(he_normal(rng, (c_out, c_in, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Deconv2d(Module):
    """Learnable up-sampler; output is exactly ``stride`` times the input size.

    Exact scaling for every input size requires ``kernel - 2*padding == stride``.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 2, kernel_size: int | None = None,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        kernel_size = stride if kernel_size is None else kernel_size
        if stride < 1:
            raise ConfigurationError(f"deconv stride must be >= 1, got {stride}")
        if kernel_size - 2 * padding != stride:
            raise ConfigurationError(
                f"deconv kernel={kernel_size}, padding={padding} does not give exact {stride}x up-sampling "
                f"(need kernel - 2*padding == stride)")
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel_size * kernel_size // (stride * stride)
        self.weight = Parameter(he_normal(rng, (c_in, c_out, kernel_size, kernel_size), max(fan_in, 1), gain=1.0))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.deconv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    """Row-vector affine map: ``(..., d_in) -> (..., d_out)``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)
