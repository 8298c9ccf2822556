"""SS-Conv-SSM block and the MedMamba classifier."""
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from ..core.ops import as_tensor, linear, linear_backward
from ..s6 import S6Params
from ..ss2d import DIRECTIONS, ss2d_backward, ss2d_forward_cached
from .layers import (
    Activation,
    BatchNorm2d,
    ConfigError,
    DWConv,
    LayerNorm,
    Linear,
    Module,
    PWConv,
    Sequential,
    channel_shuffle,
    channel_split,
    channel_unshuffle,
    check_even_spatial,
    to_channels_first,
    to_channels_last,
)

CLASS_NAMES = ("benign", "g3", "g4", "g5")


@dataclass
class SSConvSSMConfig:
    channels: int
    state_size: int = 8
    kernel_size: int = 3
    groups: int = 2

    def __post_init__(self):
        if self.channels % 2 or self.channels % self.groups:
            raise ConfigError(
                f"channels={self.channels} must be even and divisible by groups={self.groups}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")


@dataclass
class ModelConfig:
    input_size: Tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch_size: int = 4
    widths: List[int] = field(default_factory=lambda: [16, 32])
    depths: List[int] = field(default_factory=lambda: [1, 1])
    state_size: int = 8
    kernel_size: int = 3
    groups: int = 2
    num_classes: int = 4

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.widths = [int(w) for w in self.widths]
        self.depths = [int(d) for d in self.depths]
        H, W = self.input_size
        P = self.patch_size
        if H % P or W % P:
            raise ConfigError(f"input {H}x{W} is not divisible by patch size {P}")
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ConfigError("widths and depths must be non-empty and of equal length")
        down = 2 ** (len(self.widths) - 1)
        if (H // P) % down or (W // P) % down:
            raise ConfigError(
                f"token grid {H // P}x{W // P} cannot be halved {len(self.widths) - 1} times")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"patch merging doubles channels: width {a} cannot be followed by {b}")
        for w in self.widths:
            SSConvSSMConfig(w, self.state_size, self.kernel_size, self.groups)

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    def shape_trace(self, batch=1):
        """Shapes after every stage, computed without building the model."""
        H, W = self.input_size
        P = self.patch_size
        h, w = H // P, W // P
        trace = [("input", (batch, self.in_channels, H, W)),
                 ("patch_embed", (batch, self.widths[0], h, w))]
        for s, (c, depth) in enumerate(zip(self.widths, self.depths)):
            if s > 0:
                h, w = h // 2, w // 2
                trace.append((f"patch_merge.{s}", (batch, c, h, w)))
            for b in range(depth):
                trace.append((f"stage.{s}.block.{b}", (batch, c, h, w)))
        trace.append(("pool", (batch, self.widths[-1])))
        trace.append(("logits", (batch, self.num_classes)))
        return trace


# ----------------------------------------------------------- functional


def patch_embed(image, P, W, b):
    """Non-overlapping ``P x P`` patches projected to ``W.shape[1]`` channels.

    The patch vector is ordered ``(channel, row, col)``.
    """
    image = as_tensor(image)
    B, Cin, H, Wd = image.shape
    if H % P or Wd % P:
        raise ConfigError(f"image {H}x{Wd} is not divisible by patch size {P}")
    t = image.reshape(B, Cin, H // P, P, Wd // P, P).transpose(0, 2, 4, 1, 3, 5)
    t = t.reshape(B, H // P, Wd // P, Cin * P * P)
    return to_channels_first(linear(t, W, b))


def _neighborhoods(x):
    # 2x2 neighbours concatenated on channels: (0,0), (1,0), (0,1), (1,1)
    return np.concatenate(
        [x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]], axis=1)


def patch_merge(x, W, b):
    """``(B, C, H, W)`` -> ``(B, 2C, H/2, W/2)``: stack each 2x2 block, project 4C -> 2C."""
    x = as_tensor(x)
    check_even_spatial(x, "patch_merge")
    return to_channels_first(linear(to_channels_last(_neighborhoods(x)), W, b))


def classify(features, W, b):
    """Global average pool then a linear head."""
    return linear(as_tensor(features).mean(axis=(2, 3)), W, b)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------- layers


class SS2D(Module):
    def __init__(self, channels, state_size, rng=None):
        super().__init__()
        self.channels, self.state_size = channels, state_size
        for k in DIRECTIONS:
            p = S6Params.init(channels, state_size, rng) if rng is not None else S6Params.zeros(channels, state_size)
            for name, arr in zip(S6Params.names(), p.arrays()):
                self.params[f"{k}.{name}"] = arr

    def s6_params(self):
        return [S6Params(*[self.params[f"{k}.{n}"] for n in S6Params.names()]) for k in DIRECTIONS]

    def forward(self, x):
        y, self._state = ss2d_forward_cached(x, self.s6_params())
        return y

    def backward(self, dy):
        dx, grads = ss2d_backward(self._state, dy)
        for k, g in zip(DIRECTIONS, grads):
            for name, arr in zip(S6Params.names(), g.arrays()):
                self.grads[f"{k}.{name}"] = arr
        return dx


class SSMBranch(Module):
    """LN -> Linear -> SiLU -> SS2D -> LN -> Linear, tokens channels-last around SS2D."""

    def __init__(self, channels, state_size, rng=None):
        super().__init__()
        c = channels
        self.children["ln1"] = LayerNorm(c)
        self.children["proj_in"] = Linear(c, c, rng)
        self.children["act"] = Activation("silu")
        self.children["ss2d"] = SS2D(c, state_size, rng)
        self.children["ln2"] = LayerNorm(c)
        self.children["proj_out"] = Linear(c, c, rng)

    def forward(self, x):
        m = self.children
        t = m["act"](m["proj_in"](m["ln1"](to_channels_last(x))))
        t = to_channels_last(m["ss2d"](to_channels_first(t)))
        return to_channels_first(m["proj_out"](m["ln2"](t)))

    def backward(self, dy):
        m = self.children
        g = m["ln2"].backward(m["proj_out"].backward(to_channels_last(dy)))
        g = to_channels_last(m["ss2d"].backward(to_channels_first(g)))
        g = m["ln1"].backward(m["proj_in"].backward(m["act"].backward(g)))
        return to_channels_first(g)


def conv_branch(channels, kernel_size, rng=None):
    """PWConv -> BN -> ReLU -> DWConv -> BN -> ReLU -> PWConv."""
    c = channels
    return Sequential(
        PWConv(c, c, rng), BatchNorm2d(c), Activation("relu"),
        DWConv(c, kernel_size, rng), BatchNorm2d(c), Activation("relu"),
        PWConv(c, c, rng),
    )


class SSConvSSMBlock(Module):
    """Split channels, conv branch on the first half, SSM branch on the second,
    concatenate, shuffle, add the input back."""

    def __init__(self, cfg, rng=None):
        super().__init__()
        self.cfg = cfg
        half = cfg.channels // 2
        self.children["conv"] = conv_branch(half, cfg.kernel_size, rng)
        self.children["ssm"] = SSMBranch(half, cfg.state_size, rng)

    def forward(self, x):
        if x.shape[1] != self.cfg.channels:
            raise ConfigError(f"block expects {self.cfg.channels} channels, got {x.shape[1]}")
        left, right = channel_split(x)
        y = np.concatenate([self.children["conv"](left), self.children["ssm"](right)], axis=1)
        return channel_shuffle(y, self.cfg.groups) + x

    def backward(self, dy):
        g = channel_unshuffle(dy, self.cfg.groups)
        gl, gr = channel_split(g)
        dx = np.concatenate([self.children["conv"].backward(gl), self.children["ssm"].backward(gr)], axis=1)
        return dx + dy


def ss_conv_ssm_forward(x, block):
    return block(as_tensor(x))


class PatchEmbed(Module):
    def __init__(self, patch_size, in_channels, out_channels, rng=None):
        super().__init__()
        self.P = patch_size
        self.children["proj"] = Linear(in_channels * patch_size ** 2, out_channels, rng)

    def forward(self, x):
        B, Cin, H, W = x.shape
        P = self.P
        if H % P or W % P:
            raise ConfigError(f"image {H}x{W} is not divisible by patch size {P}")
        self._shape = x.shape
        t = x.reshape(B, Cin, H // P, P, W // P, P).transpose(0, 2, 4, 1, 3, 5)
        t = t.reshape(B, H // P, W // P, Cin * P * P)
        return to_channels_first(self.children["proj"](t))

    def backward(self, dy):
        B, Cin, H, W = self._shape
        P = self.P
        g = self.children["proj"].backward(to_channels_last(dy))
        g = g.reshape(B, H // P, W // P, Cin, P, P).transpose(0, 3, 1, 4, 2, 5)
        return g.reshape(B, Cin, H, W)


class PatchMerge(Module):
    def __init__(self, channels, rng=None):
        super().__init__()
        self.children["proj"] = Linear(4 * channels, 2 * channels, rng)

    def forward(self, x):
        check_even_spatial(x, "patch_merge")
        self._shape = x.shape
        return to_channels_first(self.children["proj"](to_channels_last(_neighborhoods(x))))

    def backward(self, dy):
        B, C, H, W = self._shape
        g = to_channels_first(self.children["proj"].backward(to_channels_last(dy)))
        dx = np.empty(self._shape)
        dx[:, :, 0::2, 0::2] = g[:, :C]
        dx[:, :, 1::2, 0::2] = g[:, C:2 * C]
        dx[:, :, 0::2, 1::2] = g[:, 2 * C:3 * C]
        dx[:, :, 1::2, 1::2] = g[:, 3 * C:]
        return dx


class Classifier(Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        # zero head: uniform softmax at initialization
        self.children["head"] = Linear(channels, num_classes)

    def forward(self, x):
        self._shape = x.shape
        return self.children["head"](x.mean(axis=(2, 3)))

    def backward(self, dy):
        B, C, H, W = self._shape
        g = self.children["head"].backward(dy)
        return np.broadcast_to(g[:, :, None, None] / (H * W), self._shape).copy()


class MedMamba(Module):
    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.children["embed"] = PatchEmbed(c.patch_size, c.in_channels, c.widths[0], rng)
        for s, (w, depth) in enumerate(zip(c.widths, c.depths)):
            if s > 0:
                self.children[f"merge{s}"] = PatchMerge(c.widths[s - 1], rng)
            block_cfg = SSConvSSMConfig(w, c.state_size, c.kernel_size, c.groups)
            self.children[f"stage{s}"] = Sequential(*[SSConvSSMBlock(block_cfg, rng) for _ in range(depth)])
        self.children["head"] = Classifier(c.widths[-1], c.num_classes)

    def forward(self, images):
        H, W = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (self.config.in_channels, H, W):
            raise ConfigError(
                f"model expects (B, {self.config.in_channels}, {H}, {W}), got {images.shape}")
        x = as_tensor(images)
        for layer in self.children.values():
            x = layer(x)
        return x

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self.children.values()):
            g = layer.backward(g)
        return g

    def parameter_count(self):
        return sum(v.size for _, v in self.named_parameters())
