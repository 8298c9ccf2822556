"""Layer objects with explicit forward caches and hand-written backward passes.

Each layer owns ``params`` and, after :meth:`Module.backward`, matching
``grads``. Containers register children in ``self.children``; parameter
names are dotted paths (``stages.0.0.conv.pw1.W``).
"""
from collections import OrderedDict

import numpy as np

from ..core.ops import (
    DifferentiableOp,
    DimensionError,
    activation,
    activation_backward,
    as_tensor,
    conv2d,
    conv2d_backward,
    linear,
    linear_backward,
    normalize,
    normalize_backward,
)


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


class Module:
    def __init__(self):
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self.buffers = OrderedDict()
        self.children = OrderedDict()
        self.training = True

    def __call__(self, x):
        return self.forward(x)

    def train(self, mode=True):
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads.get(k)
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        out = OrderedDict(self.named_parameters())
        out.update(("buffer:" + k, v) for k, v in self.named_buffers())
        return out

    def load_state_dict(self, state):
        mine = self.state_dict()
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in mine.items():
            if v.shape != state[k].shape:
                raise ConfigError(f"{k}: shape {state[k].shape} does not match {v.shape}")
            v[...] = state[k]

    def zero_grad(self):
        self.grads.clear()
        for child in self.children.values():
            child.zero_grad()


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, d_in, d_out, rng=None):
        super().__init__()
        scale = 1.0 / np.sqrt(d_in)
        self.params["W"] = rng.standard_normal((d_in, d_out)) * scale if rng is not None else np.zeros((d_in, d_out))
        self.params["b"] = np.zeros(d_out)

    def forward(self, x):
        self._x = x
        return linear(x, self.params["W"], self.params["b"])

    def backward(self, dy):
        dx, self.grads["W"], self.grads["b"] = linear_backward(self._x, self.params["W"], dy)
        return dx


class PWConv(Module):
    def __init__(self, c_in, c_out, rng=None):
        super().__init__()
        scale = 1.0 / np.sqrt(c_in)
        self.params["W"] = rng.standard_normal((c_out, c_in)) * scale if rng is not None else np.zeros((c_out, c_in))
        self.params["b"] = np.zeros(c_out)

    def forward(self, x):
        self._x = x
        return conv2d(x, self.params["W"], "pointwise", self.params["b"])

    def backward(self, dy):
        dx, self.grads["W"], self.grads["b"] = conv2d_backward(self._x, self.params["W"], dy, "pointwise")
        return dx


class DWConv(Module):
    def __init__(self, channels, kernel_size=3, rng=None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd for 'same' padding, got {kernel_size}")
        shape = (channels, kernel_size, kernel_size)
        self.params["W"] = rng.standard_normal(shape) / kernel_size if rng is not None else np.zeros(shape)
        self.params["b"] = np.zeros(channels)

    def forward(self, x):
        self._x = x
        return conv2d(x, self.params["W"], "depthwise", self.params["b"])

    def backward(self, dy):
        dx, self.grads["W"], self.grads["b"] = conv2d_backward(self._x, self.params["W"], dy, "depthwise")
        return dx


class BatchNorm2d(Module):
    """Batch statistics in training mode; running statistics (momentum 0.1) in eval mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        self._x = x
        p, buf = self.params, self.buffers
        if self.training:
            m = self.momentum
            buf["running_mean"][...] = (1 - m) * buf["running_mean"] + m * x.mean(axis=(0, 2, 3))
            buf["running_var"][...] = (1 - m) * buf["running_var"] + m * x.var(axis=(0, 2, 3))
            return normalize(x, "batch", p["scale"], p["shift"], eps=self.eps)
        self._frozen = (buf["running_mean"].copy(), buf["running_var"].copy())
        return normalize(x, "batch", p["scale"], p["shift"], eps=self.eps,
                         mean=self._frozen[0], var=self._frozen[1])

    def backward(self, dy):
        p = self.params
        if self.training:
            dx, self.grads["scale"], self.grads["shift"] = normalize_backward(
                self._x, dy, "batch", p["scale"], eps=self.eps)
            return dx
        mean, var = self._frozen
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (self._x - mean[None, :, None, None]) * inv[None, :, None, None]
        self.grads["scale"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["shift"] = dy.sum(axis=(0, 2, 3))
        return dy * (p["scale"] * inv)[None, :, None, None]


class LayerNorm(Module):
    """Normalizes over the last axis."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)

    def forward(self, x):
        self._x = x
        return normalize(x, "layer", self.params["scale"], self.params["shift"], eps=self.eps)

    def backward(self, dy):
        dx, self.grads["scale"], self.grads["shift"] = normalize_backward(
            self._x, dy, "layer", self.params["scale"], eps=self.eps)
        return dx


class Activation(Module):
    def __init__(self, kind):
        super().__init__()
        self.kind = kind

    def forward(self, x):
        self._x = x
        return activation(x, self.kind)

    def backward(self, dy):
        return activation_backward(self._x, dy, self.kind)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.children[str(i)] = layer

    def forward(self, x):
        for layer in self.children.values():
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.children.values()):
            dy = layer.backward(dy)
        return dy


def module_op(module):
    """Wrap a module as a :class:`DifferentiableOp` over ``(x, *parameters)``.

    Forward writes the given parameter values into the module first, so the
    op can be finite-differenced in any coordinate.
    """
    def load(arrays):
        for (_, p), a in zip(module.named_parameters(), arrays):
            p[...] = a

    def fwd(x, *arrays):
        load(arrays)
        return module(x)

    def bwd(inputs, dy):
        load(inputs[1:])
        module(inputs[0])
        dx = module.backward(dy)
        return (dx, *[g for _, g in module.named_grads()])

    return DifferentiableOp(fwd, bwd, name=type(module).__name__)


def parameter_arrays(module):
    return [p.copy() for _, p in module.named_parameters()]


# ------------------------------------------------------- channel plumbing


def channel_split(x):
    """First and second halves of the channel axis."""
    C = x.shape[1]
    if C % 2:
        raise ConfigError(f"channel_split needs an even channel count, got {C}")
    return x[:, : C // 2], x[:, C // 2:]


def channel_shuffle(x, groups):
    """Group transpose: view channels as ``(groups, C // groups)``, swap, flatten."""
    x = as_tensor(x)
    B, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigError(f"{C} channels cannot be shuffled in {groups} groups")
    rest = x.shape[2:]
    return x.reshape(B, groups, C // groups, *rest).swapaxes(1, 2).reshape(B, C, *rest)


def channel_unshuffle(x, groups):
    """Inverse of :func:`channel_shuffle` with the same ``groups``."""
    return channel_shuffle(x, x.shape[1] // groups)


def to_channels_last(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_channels_first(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def check_even_spatial(x, what):
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ConfigError(f"{what} needs even H and W, got {x.shape[2]}x{x.shape[3]}")


__all__ = [
    "Activation",
    "BatchNorm2d",
    "ConfigError",
    "DWConv",
    "DimensionError",
    "LayerNorm",
    "Linear",
    "Module",
    "PWConv",
    "Sequential",
    "channel_shuffle",
    "channel_split",
    "channel_unshuffle",
    "module_op",
    "parameter_arrays",
    "to_channels_first",
    "to_channels_last",
]
