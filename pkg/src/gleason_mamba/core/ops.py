"""Dense float64 kernels with paired vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, row-major,
feature maps channels-first ``(B, C, H, W)``.
"""
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------- linear


def linear(x, W, b=None):
    """``y[..., j] = sum_i x[..., i] * W[i, j] + b[j]``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"weight must be 2-D (d_in, d_out), got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"last axis of x ({x.shape[-1]}) does not match axis 0 of W ({W.shape[0]})")
    y = x @ W
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match axis 1 of W ({W.shape[1]})")
        y = y + b
    return y


def linear_backward(x, W, dy):
    """Returns ``(dx, dW, db)``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


# ------------------------------------------------------------ convolution


def _dw_kernel(kernel, C):
    k = as_tensor(kernel)
    if k.ndim == 4 and k.shape[1] == 1:
        k = k[:, 0]
    if k.ndim != 3 or k.shape[1] != k.shape[2]:
        raise DimensionError(f"depthwise kernel must be (C, K, K), got {kernel.shape}")
    if k.shape[0] != C:
        raise DimensionError(f"depthwise kernel has {k.shape[0]} filters for {C} input channels")
    if k.shape[1] % 2 == 0:
        raise DimensionError(f"'same' padding needs an odd kernel size, got {k.shape[1]}")
    return np.ascontiguousarray(k)


def _pw_kernel(kernel, C):
    k = as_tensor(kernel)
    if k.ndim == 4 and k.shape[2:] == (1, 1):
        k = k[:, :, 0, 0]
    if k.ndim != 2:
        raise DimensionError(f"pointwise kernel must be (C_out, C_in), got {kernel.shape}")
    if k.shape[1] != C:
        raise DimensionError(f"pointwise kernel expects {k.shape[1]} input channels, got {C}")
    return k


def conv2d(x, kernel, mode="depthwise", bias=None):
    """Cross-correlation with zero 'same' padding.

    ``depthwise``: kernel ``(C, K, K)``, one filter per channel.
    ``pointwise``: kernel ``(C_out, C_in)``, a 1x1 mix across channels.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (B, C, H, W), got {x.shape}")
    C = x.shape[1]
    if mode == "depthwise":
        y = kernels.dwconv_forward(x, _dw_kernel(kernel, C))
    elif mode == "pointwise":
        y = np.einsum("oc,bchw->bohw", _pw_kernel(kernel, C), x)
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    if bias is not None:
        y = y + as_tensor(bias)[None, :, None, None]
    return y


def conv2d_backward(x, kernel, dy, mode="depthwise"):
    """Returns ``(dx, dkernel, dbias)``; ``dkernel`` matches the shape of ``kernel``."""
    x, dy = as_tensor(x), as_tensor(dy)
    C = x.shape[1]
    if mode == "depthwise":
        dx, dk = kernels.dwconv_backward(x, _dw_kernel(kernel, C), dy)
    elif mode == "pointwise":
        k = _pw_kernel(kernel, C)
        dx = np.einsum("oc,bohw->bchw", k, dy)
        dk = np.einsum("bohw,bchw->oc", dy, x)
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    return dx, dk.reshape(np.shape(kernel)), dy.sum(axis=(0, 2, 3))


# ------------------------------------------------------------ activations


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = ("relu", "silu", "softplus", "exp")


def activation(x, kind):
    x = as_tensor(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "softplus":
        return np.logaddexp(0.0, x)
    if kind == "exp":
        return np.exp(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(x, dy, kind):
    if kind == "relu":
        # subgradient 0 at x == 0
        return dy * (x > 0)
    if kind == "silu":
        s = sigmoid(x)
        return dy * (s * (1.0 + x * (1.0 - s)))
    if kind == "softplus":
        return dy * sigmoid(x)
    if kind == "exp":
        return dy * np.exp(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# --------------------------------------------------------- normalization


def _norm_axes(x, kind):
    if kind == "layer":
        return (x.ndim - 1,)
    if kind == "batch":
        if x.ndim < 2:
            raise DimensionError("batch norm needs a channel axis at position 1")
        return (0,) + tuple(range(2, x.ndim))
    raise ValueError(f"unknown normalization {kind!r}")


def _param_shape(x, kind):
    shape = [1] * x.ndim
    ch = x.ndim - 1 if kind == "layer" else 1
    shape[ch] = x.shape[ch]
    return tuple(shape)


def normalize(x, kind, scale=None, shift=None, eps=1e-10, mean=None, var=None):
    """Standardize along the normalized axes, then apply ``scale`` / ``shift``.

    ``layer`` normalizes over the last axis; ``batch`` over every axis but 1.
    Passing ``mean``/``var`` (per channel) substitutes fixed statistics, as
    batch norm does at inference.
    """
    x = as_tensor(x)
    axes = _norm_axes(x, kind)
    pshape = _param_shape(x, kind)
    if mean is None:
        mu = x.mean(axis=axes, keepdims=True)
        v = x.var(axis=axes, keepdims=True)
    else:
        mu = as_tensor(mean).reshape(pshape)
        v = as_tensor(var).reshape(pshape)
    y = (x - mu) / np.sqrt(v + eps)
    if scale is not None:
        y = y * as_tensor(scale).reshape(pshape)
    if shift is not None:
        y = y + as_tensor(shift).reshape(pshape)
    return y


def normalize_backward(x, dy, kind, scale=None, eps=1e-10):
    """VJP of :func:`normalize` with batch statistics. Returns ``(dx, dscale, dshift)``."""
    axes = _norm_axes(x, kind)
    pshape = _param_shape(x, kind)
    m = int(np.prod([x.shape[a] for a in axes]))
    mu = x.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + eps)
    xhat = (x - mu) * inv
    ch = x.ndim - 1 if kind == "layer" else 1
    others = tuple(a for a in range(x.ndim) if a != ch)
    dshift = dy.sum(axis=others)
    dscale = (dy * xhat).sum(axis=others)
    g = dy if scale is None else dy * as_tensor(scale).reshape(pshape)
    dx = inv / m * (m * g - g.sum(axis=axes, keepdims=True)
                    - xhat * (g * xhat).sum(axis=axes, keepdims=True))
    return dx, dscale.reshape(-1), dshift.reshape(-1)


# ------------------------------------------------------------ grad check


@dataclass
class DifferentiableOp:
    """A forward map plus its VJP ``backward(inputs, cotangent) -> per-input cotangents``."""

    forward: Callable[..., np.ndarray]
    backward: Callable[[Sequence[np.ndarray], np.ndarray], Tuple[np.ndarray, ...]]
    name: str = "op"

    def __call__(self, *inputs):
        return self.forward(*inputs)


class GradCheckError(RuntimeError):
    pass


def grad_check(op, inputs, eps=1e-5, seed=0, max_coords=None, verbose=False):
    """Worst relative error between the analytic VJP and central differences.

    A random cotangent ``u`` turns the op into the scalar ``<u, f(x)>``; each
    input coordinate is perturbed by ``+-eps``. Per input the error is
    ``||g_vjp - g_fd|| / max(||g_vjp||, ||g_fd||, floor)`` where ``floor`` is
    ``1e-3`` times the largest per-input gradient norm, so inputs whose true
    gradient vanishes (a bias feeding a batch norm) are not judged on
    finite-difference noise alone. ``max_coords`` samples that many
    coordinates per input instead of all of them.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-4]")
    rng = np.random.default_rng(seed)
    inputs = [as_tensor(t).copy() for t in inputs]
    out = op.forward(*inputs)
    if not np.all(np.isfinite(out)):
        raise GradCheckError(f"{op.name}: forward produced non-finite values at the check point")
    u = rng.standard_normal(np.shape(out))
    analytic = op.backward(inputs, u)
    if len(analytic) != len(inputs):
        raise GradCheckError(f"{op.name}: backward returned {len(analytic)} cotangents for {len(inputs)} inputs")

    pairs = []
    for k, (x, g) in enumerate(zip(inputs, analytic)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise GradCheckError(f"{op.name}: cotangent {k} has shape {g.shape}, input has {x.shape}")
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = np.vdot(u, op.forward(*inputs))
            flat[i] = orig - eps
            fm = np.vdot(u, op.forward(*inputs))
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        pairs.append((g.reshape(-1)[idx], numeric))

    scale = max((max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for k, (a, n) in enumerate(pairs):
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor)
        if verbose:
            print(f"{op.name}[{k}] shape={inputs[k].shape} rel_err={err:.3e}")
        worst = max(worst, err)
    return worst


# ---------------------------------------------------- ready-made op wrappers


def linear_op():
    return DifferentiableOp(
        forward=lambda x, W, b: linear(x, W, b),
        backward=lambda ins, dy: linear_backward(ins[0], ins[1], dy),
        name="linear",
    )


def conv2d_op(mode):
    return DifferentiableOp(
        forward=lambda x, k, b: conv2d(x, k, mode, b),
        backward=lambda ins, dy: conv2d_backward(ins[0], ins[1], dy, mode),
        name=f"conv2d[{mode}]",
    )


def activation_op(kind):
    return DifferentiableOp(
        forward=lambda x: activation(x, kind),
        backward=lambda ins, dy: (activation_backward(ins[0], dy, kind),),
        name=kind,
    )


def normalize_op(kind, eps=1e-5):
    return DifferentiableOp(
        forward=lambda x, s, b: normalize(x, kind, s, b, eps=eps),
        backward=lambda ins, dy: normalize_backward(ins[0], dy, kind, ins[1], eps=eps),
        name=f"{kind}_norm",
    )
