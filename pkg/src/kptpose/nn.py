"""Small layer wrappers over the tensor ops, with named parameter lists."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Base: children registered by attribute, parameters by name."""

    def params(self):
        """(name, Tensor) pairs for this module and its children, in a
        stable attribute order."""
        out = []
        for key, val in vars(self).items():
            if isinstance(val, T.Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.params())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", p) for n, p in item.params())
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out


def he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def glorot_init(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, relu_gain=False):
        init = he_init(rng, (d_in, d_out), d_in) if relu_gain else \
            glorot_init(rng, (d_in, d_out), d_in, d_out)
        self.w = T.Tensor(init, requires_grad=True)
        self.b = T.Tensor(np.zeros(d_out, np.float32), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)


class MLP(Module):
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, rng, widths):
        self.layers = [Linear(rng, a, b, relu_gain=(i < len(widths) - 2))
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0):
        self.w = T.Tensor(he_init(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True)
        self.b = T.Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = T.Tensor(np.ones(d, np.float32), requires_grad=True)
        self.beta = T.Tensor(np.zeros(d, np.float32), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)
