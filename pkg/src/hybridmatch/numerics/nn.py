"""Parameter containers built on the tensor primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Owns named parameters, buffers, and child modules.

    Attribute assignment registers children automatically; parameter names
    are dotted paths such as ``layers.3.ssm.a_log``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype).reshape(p.shape)
        for mod_name, mod in self._iter_named_modules():
            for b in mod._buffers:
                key = f"{mod_name}{b}"
                object.__setattr__(mod, b, np.array(state[key], dtype=getattr(mod, b).dtype))

    def _iter_named_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._iter_named_modules(f"{prefix}{cname}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for 64-bit shadow checks)."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for b in m._buffers:
                object.__setattr__(m, b, getattr(m, b).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as ``[in, out]``; uniform(±1/sqrt(in)) init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    """2-D convolution with Kaiming-normal (fan-in, ReLU gain) initialisation."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = parameter(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            axis = 1 if x.ndim == 4 else 0
            red = tuple(i for i in range(x.ndim) if i != axis)
            n = x.size // x.shape[axis]
            m = x.data.mean(axis=red)
            v = x.data.var(axis=red) * (n / max(n - 1, 1))
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * m).astype(self.running_mean.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * v).astype(self.running_var.dtype)
            return ops.batch_norm(x, self.weight, self.bias, eps=self.eps, training=True)
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.eps, training=False)


class Conv1d(Module):
    """Length-preserving 1-D convolution (odd kernel, symmetric padding)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        self.groups = groups
        fan_in = (c_in // groups) * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, (c_out, c_in // groups, kernel)))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.groups)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]
