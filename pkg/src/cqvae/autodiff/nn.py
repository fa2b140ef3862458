"""Parameter containers and the handful of layers the models need."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data, dtype):
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class Module:
    """Tracks parameters and submodules assigned as attributes, in insertion order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise T.ShapeError(f"load_state_dict: {name} has shape {value.shape}, expected {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=T.DEFAULT_DTYPE, init_scale=1.0):
        self.weight = parameter(init_scale * _he_uniform(rng, in_features, (in_features, out_features), dtype), dtype)
        self.bias = parameter(np.zeros(out_features), dtype)

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, dtype=T.DEFAULT_DTYPE):
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = parameter(_he_uniform(rng, fan_in, shape, dtype), dtype)
        self.bias = parameter(np.zeros(out_channels), dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, output_padding=0,
                 dtype=T.DEFAULT_DTYPE):
        fan_in = in_channels * kernel_size * kernel_size // max(stride * stride, 1)
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = parameter(_he_uniform(rng, max(fan_in, 1), shape, dtype), dtype)
        self.bias = parameter(np.zeros(out_channels), dtype)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                                  output_padding=self.output_padding)


class MLP(Module):
    """Linear layers with ReLU between them; the last layer stays linear."""

    def __init__(self, sizes, rng, dtype=T.DEFAULT_DTYPE, last_init_scale=1.0):
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, dtype, init_scale=last_init_scale if i == n - 1 else 1.0)
            for i in range(n)
        ]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x
