"""Layer building blocks with named, freezable parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from medusa import ops
from medusa.errors import InvalidShapeError
from medusa.tensor import Parameter, Tensor


class Module:
    """Minimal container: registers parameters, buffers and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters and buffers keyed by full name, in registration order."""
        out = {n: p.data for n, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            _copy_into(p.data, arrays, name)
        for name, b in self.named_buffers(prefix):
            _copy_into(b, arrays, name)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> None:
        """Stop updates to every parameter and buffer below this module."""
        object.__setattr__(self, "frozen", True)
        for p in self._params.values():
            p.freeze()
        for child in self._children.values():
            child.freeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _copy_into(dst: np.ndarray, arrays: dict[str, np.ndarray], name: str) -> None:
    if name not in arrays:
        raise KeyError(name)
    src = arrays[name]
    if src.shape != dst.shape:
        raise InvalidShapeError(f"{name}: stored shape {src.shape} != expected {dst.shape}")
    dst[...] = src


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.padding = (k - 1) // 2
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        # frozen layers keep their statistics as well as their weights
        training = self.training and not self.frozen
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class ConvBlock(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, rng, stride)
        self.bn = BatchNorm2d(c_out)

    def pre_activation(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.pre_activation(x))


class ResidualBlock(Module):
    """x + ConvBlock(x), 3x3, channel-preserving."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.block = ConvBlock(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(self.block(x), x)


class SpatialAttention(Module):
    """sigmoid(f1(x)) * f2(x) with f = conv + BN + ReLU.

    ``gate="literal"`` applies the sigmoid after the ReLU, so gates lie in
    [0.5, 1). ``gate="pre_relu"`` applies it to the batch-norm output instead,
    giving gates in (0, 1).
    """

    def __init__(self, channels: int, rng: np.random.Generator, gate: str = "literal"):
        super().__init__()
        if gate not in ("literal", "pre_relu"):
            raise ValueError(f"unknown gate mode {gate!r}")
        self.channels = channels
        self.gate_mode = gate
        self.conv1 = ConvBlock(channels, channels, 1, rng)
        self.conv2 = ConvBlock(channels, channels, 3, rng)

    def gate(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise InvalidShapeError(f"spatial attention over {self.channels} channels got input {x.shape}")
        if self.gate_mode == "literal":
            return ops.sigmoid(self.conv1(x))
        return ops.sigmoid(self.conv1.pre_activation(x))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.hadamard(self.gate(x), self.conv2(x))
