"""Minimal module system: parameter registration, naming, train/eval, state dicts."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def _slot(self, name: str):
        owner: Module = self
        *path, leaf = name.split(".")
        for part in path:
            owner = owner._modules[part]
        if leaf in owner._params:
            return owner, leaf, True
        if leaf in owner._buffers:
            return owner, leaf, False
        raise KeyError(name)

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        bad = [f"{k}: model {own[k].shape} vs given {np.shape(state[k])}"
               for k in own if k in state and own[k].shape != np.shape(state[k])]
        if strict and (missing or unexpected or bad):
            lines = [f"missing: {k}" for k in missing] + [f"unexpected: {k}" for k in unexpected]
            lines += [f"shape mismatch: {b}" for b in bad]
            raise KeyError("state dict does not match model:\n  " + "\n  ".join(lines))
        for name, value in state.items():
            if name not in own:
                continue
            owner, leaf, is_param = self._slot(name)
            if is_param:
                p = owner._params[leaf]
                p.data[...] = value
            else:
                owner._buffers[leaf][...] = value

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def trunc_normal(rng, shape, std, dtype):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None, std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng()
        dtype = get_default_dtype()
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), std, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv3d(Module):
    """3D convolution. ``stage`` tags the layer (c1..c5) for inflation plans."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias: bool = False, rng=None, stage: Optional[str] = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        dtype = get_default_dtype()
        k = ops._triple(kernel_size)
        self.stride = ops._triple(stride)
        self.padding = ops._triple(padding)
        self.stage = stage
        fan_in = in_channels * k[0] * k[1] * k[2]
        # He-normal, fan-in; matches relu-activated residual nets
        std = math.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_channels, in_channels) + k).astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype)) if bias else None

    @property
    def kernel_size(self) -> tuple:
        return self.weight.shape[2:]

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype))
        self.bias = Parameter(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, bias: bool = True):
        super().__init__()
        dtype = get_default_dtype()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype))
        self.bias = Parameter(np.zeros(dim, dtype)) if bias else None

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]
