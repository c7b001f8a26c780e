"""Parameter containers and layer modules on top of the tensor engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor: always requires grad and keeps a grad buffer."""

    __slots__ = ("frozen",)

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.frozen = False

    def freeze(self) -> "Parameter":
        self.requires_grad = False
        self.frozen = True
        return self


class Module:
    """Base class with automatic child/parameter registration.

    Assigning a Parameter, Module, or ModuleList to an attribute registers
    it; ``named_parameters`` walks the tree yielding '/'-joined paths.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Track non-trainable state (e.g. running statistics) so it rides
        along in state_dict round trips."""
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix=f"{prefix}{name}/")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters()
                   if not (trainable_only and p.frozen))

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad[...] = 0.0

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own: dict[str, np.ndarray] = {n: p.data for n, p in self.named_parameters()}
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={missing}, unexpected={extra}")
        for name, dst in own.items():
            arr = np.asarray(state[name], dtype=dst.dtype)
            if arr.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {dst.shape}")
            dst[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList:
    """Ordered list of child modules that registers under its index."""

    def __init__(self, modules=()):
        self._modules = list(modules)

    def append(self, module: Module) -> None:
        self._modules.append(module)

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, idx):
        return self._modules[idx]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, m in enumerate(self._modules):
            yield from m.named_parameters(prefix=f"{prefix}{i}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for i, m in enumerate(self._modules):
            yield from m.named_buffers(prefix=f"{prefix}{i}/")

    def train(self, mode: bool = True) -> "ModuleList":
        for m in self._modules:
            m.train(mode)
        return self


# ---------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    """He-uniform: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), suited to relu nets."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-uniform: U(-sqrt(6/(fan_in+fan_out)), +...)."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------

class Conv1d(Module):
    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, padding: str = "same",
                 bias: bool = True, init: str = "kaiming"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        shape = (out_channels, in_channels, kernel_size)
        if init == "kaiming":
            w = kaiming_uniform(rng, shape, fan_in)
        elif init == "xavier":
            w = xavier_uniform(rng, shape, fan_in, out_channels * kernel_size)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 bias: bool = True, init: str = "xavier"):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        shape = (in_features, out_features)
        if init == "xavier":
            w = xavier_uniform(rng, shape, in_features, out_features)
        elif init == "kaiming":
            w = kaiming_uniform(rng, shape, in_features)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class BatchNorm1d(Module):
    """Channel-wise batch norm for [B,C,L] with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        # buffers share the parameter dtype so mixed-precision math never upcasts
        self.register_buffer("running_mean",
                             np.zeros(channels, dtype=self.gamma.data.dtype))
        self.register_buffer("running_var",
                             np.ones(channels, dtype=self.gamma.data.dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm1d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             training=self.training,
                             momentum=self.momentum, eps=self.eps)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.features = features
        self.eps = eps
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)
