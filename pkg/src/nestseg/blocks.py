"""Composite layers: conv block, attention gate, nested UNet block, channel
attention, spatial attention fusion, and the Sobel edge enhancement layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Dense, DepthwiseSeparableConv, Module, ModuleList
from .tensor import Tensor

EEL_EPS = 1e-12


class ConvBlock(Module):
    """Two rounds of depthwise-separable conv (k=3, same) -> batchnorm -> LeakyReLU.

    The pointwise convs carry no bias: the following batchnorm's shift makes
    one redundant.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dilation: int = 1, alpha: float = 0.01):
        super().__init__()
        self.in_ch, self.out_ch, self.dilation, self.alpha = in_ch, out_ch, dilation, alpha
        self.conv1 = DepthwiseSeparableConv(in_ch, out_ch, rng, dilation=dilation, pw_bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = DepthwiseSeparableConv(out_ch, out_ch, rng, dilation=dilation, pw_bias=False)
        self.bn2 = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"ConvBlock: expected {self.in_ch} input channels, got input shape {x.shape}")
        x = ops.leaky_relu(self.bn1(self.conv1(x)), self.alpha)
        return ops.leaky_relu(self.bn2(self.conv2(x)), self.alpha)


class AttentionGate(Module):
    """Additive gate: ``x * sigmoid(psi(leaky_relu(W_x x + W_g g)))``."""

    def __init__(self, x_ch: int, g_ch: int, rng: np.random.Generator, alpha: float = 0.01):
        super().__init__()
        self.inter = max(x_ch // 2, 1)
        self.alpha = alpha
        self.w_x = Conv2d(x_ch, self.inter, 1, rng)
        self.w_g = Conv2d(g_ch, self.inter, 1, rng)
        self.psi = Conv2d(self.inter, 1, 1, rng)

    def coefficients(self, x: Tensor, g: Tensor) -> Tensor:
        if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
            raise ValueError(f"AttentionGate: spatial mismatch between x {x.shape} and g {g.shape}")
        a = ops.leaky_relu(self.w_x(x) + self.w_g(g), self.alpha)
        return ops.sigmoid(self.psi(a))

    def forward(self, x: Tensor, g: Tensor) -> Tensor:
        return x * self.coefficients(x, g)


@dataclass(frozen=True)
class NubSpec:
    """Shape of one nested UNet block.

    ``depth`` is the variant number N: the block holds 2N conv blocks, N-2
    max-pools and N-2 upsamples. A bridge block has N=4 topology with pooling
    replaced by dilations (1, 2, 4).
    """

    depth: int
    in_channels: int
    base_channels: int
    is_bridge: bool = False
    inner_attention: bool = True

    def __post_init__(self):
        if self.depth < 4:
            raise ValueError(f"NUB depth must be >= 4, got {self.depth}")
        if self.is_bridge and self.depth != 4:
            raise ValueError("bridge NUB must have depth 4")

    @property
    def divisor(self) -> int:
        return 1 if self.is_bridge else 2 ** (self.depth - 2)

    @property
    def n_levels(self) -> int:
        return self.depth - 2


BRIDGE_DILATIONS = (1, 2, 4)


class NestedUNetBlock(Module):
    """UNet-shaped block: first conv, N-2 pooled descents, a bottleneck, a
    mirrored gated decoder, a fusion and an output conv, plus an outer
    1x1-projected residual."""

    def __init__(self, spec: NubSpec, rng: np.random.Generator,
                 upsample_mode: str = "bilinear", alpha: float = 0.01):
        super().__init__()
        self.spec = spec
        self.upsample_mode = upsample_mode
        c = spec.base_channels
        levels = spec.n_levels
        enc_dil = BRIDGE_DILATIONS if spec.is_bridge else (1,) * (levels + 1)

        self.first = ConvBlock(spec.in_channels, c, rng, alpha=alpha)
        self.encoder = ModuleList(ConvBlock(c, c, rng, dilation=enc_dil[i], alpha=alpha) for i in range(levels))
        self.bottleneck = ConvBlock(c, c, rng, dilation=enc_dil[levels], alpha=alpha)
        self.gates = ModuleList(
            AttentionGate(c, c, rng, alpha=alpha) for _ in range(levels)
        ) if spec.inner_attention else None
        self.decoder = ModuleList(ConvBlock(2 * c, c, rng, alpha=alpha) for _ in range(levels))
        self.fusion = ConvBlock(2 * c, c, rng, alpha=alpha)
        self.out = ConvBlock(c, c, rng, alpha=alpha)
        self.proj = Conv2d(spec.in_channels, c, 1, rng, init="linear")
        # the block body starts switched off: at init the output is the
        # projection alone, which keeps deep stacks of blocks trainable
        self.out.bn2.gamma.data[...] = 0.0

    def _down(self, x: Tensor) -> Tensor:
        return x if self.spec.is_bridge else ops.maxpool2(x)

    def _up(self, x: Tensor) -> Tensor:
        return x if self.spec.is_bridge else ops.upsample2(x, self.upsample_mode)

    def forward(self, x: Tensor) -> Tensor:
        d = self.spec.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise ValueError(
                f"NUB-{self.spec.depth}: spatial size {x.shape[2:]} must be divisible by {d}"
            )
        f = self.first(x)
        skips = [f]
        h = f
        for block in self.encoder:
            h = block(self._down(h))
            skips.append(h)
        h = self.bottleneck(h)
        # skips[-1] feeds the bottleneck; the decoder rejoins levels N-3 .. 0
        for i, block in enumerate(self.decoder):
            level = self.spec.n_levels - 1 - i
            up = self._up(h)
            skip = skips[level]
            if self.gates is not None:
                skip = self.gates[i](skip, up)
            h = block(ops.concat([up, skip], axis=1))
        h = self.fusion(ops.concat([h, f], axis=1))
        return self.out(h) + self.proj(x)


class ChannelAttention(Module):
    """Refining conv block, then (GAP + GMP) -> dense/swish -> dense/sigmoid
    channel weights applied to the refined map."""

    def __init__(self, ch: int, rng: np.random.Generator, reduction: int = 4, alpha: float = 0.01):
        super().__init__()
        hidden = max(ch // reduction, 1)
        self.refine = ConvBlock(ch, ch, rng, alpha=alpha)
        self.fc1 = Dense(ch, hidden, rng)
        self.fc2 = Dense(hidden, ch, rng)

    def weights(self, refined: Tensor) -> Tensor:
        pooled = ops.global_avg_pool(refined) + ops.global_max_pool(refined)
        return ops.sigmoid(self.fc2(ops.swish(self.fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        refined = self.refine(x)
        s = self.weights(refined)
        return refined * s.reshape(s.shape[0], s.shape[1], 1, 1)


class AttentionModule(Module):
    """Fuse a skip map with an (already upsampled) deeper map.

    skip -> residual conv -> concat with deep -> single-head dot-product
    attention across all H*W positions -> output projection -> + concat map.
    Output has ``skip_ch + deep_ch`` channels.
    """

    def __init__(self, skip_ch: int, deep_ch: int, rng: np.random.Generator,
                 max_positions: int = 4096, alpha: float = 0.01):
        super().__init__()
        self.channels = skip_ch + deep_ch
        self.width = max(self.channels // 2, 1)
        self.max_positions = max_positions
        self.res_conv = ConvBlock(skip_ch, skip_ch, rng, alpha=alpha)
        self.res_proj = Conv2d(skip_ch, skip_ch, 1, rng, init="linear")
        # a key bias only shifts every score in a row equally, so q/k/v carry none
        self.query = Dense(self.channels, self.width, rng, bias=False, init="linear")
        self.key = Dense(self.channels, self.width, rng, bias=False, init="linear")
        self.value = Dense(self.channels, self.width, rng, bias=False, init="linear")
        self.proj = Dense(self.width, self.channels, rng, init="linear")

    def _sequence(self, fused: Tensor) -> Tensor:
        n, c, h, w = fused.shape
        return fused.reshape(n, c, h * w).transpose(0, 2, 1)

    def attention_weights(self, fused: Tensor) -> Tensor:
        """Explicit ``(N, L, L)`` attention matrix for a fused map (inspection only)."""
        seq = self._sequence(fused)
        return ops.attention_weights(self.query(seq), self.key(seq), 1.0 / math.sqrt(self.width))

    def fuse(self, skip: Tensor, deep: Tensor) -> Tensor:
        """Residual-refined skip concatenated with the deep map."""
        res = self.res_conv(skip) + self.res_proj(skip)
        return ops.concat([res, deep], axis=1)

    def forward(self, skip: Tensor, deep: Tensor) -> Tensor:
        if skip.shape[0] != deep.shape[0] or skip.shape[2:] != deep.shape[2:]:
            raise ValueError(f"AttentionModule: spatial mismatch between skip {skip.shape} and deep {deep.shape}")
        n, _, h, w = skip.shape
        if h * w > self.max_positions:
            raise ValueError(
                f"AttentionModule: {h}x{w} = {h * w} positions exceeds the cap of "
                f"{self.max_positions}; reduce the input resolution or raise attention_cap"
            )
        fused = self.fuse(skip, deep)
        seq = self._sequence(fused)
        o = ops.scaled_dot_attention(self.query(seq), self.key(seq), self.value(seq),
                                     1.0 / math.sqrt(self.width))
        o = self.proj(o).transpose(0, 2, 1).reshape(n, self.channels, h, w)
        return o + fused


def eel_forward(x: Tensor, mode: str = "residual", lam: float = 1.0) -> Tensor:
    """Sobel edge enhancement.

    ``E = sqrt(Ex^2 + Ey^2 + 1e-12)`` per channel with fixed Sobel kernels.
    ``mode="magnitude"`` returns E; ``mode="residual"`` returns ``x + lam * E``.
    """
    ex, ey = ops.sobel(x)
    e = ops.sqrt(ops.square(ex) + ops.square(ey) + EEL_EPS)
    if mode == "magnitude":
        return e
    if mode == "residual":
        return x + e * lam
    raise ValueError(f"unknown EEL mode {mode!r}")


class EdgeEnhancement(Module):
    """Parameter-free module wrapper around :func:`eel_forward`."""

    def __init__(self, mode: str = "residual", lam: float = 1.0):
        super().__init__()
        self.mode, self.lam = mode, lam

    def forward(self, x: Tensor) -> Tensor:
        return eel_forward(x, self.mode, self.lam)


def count_blocks(module: Module) -> dict[str, int]:
    """Structural inventory of composite layers inside ``module``."""
    counts = {"conv_block": 0, "attention_gate": 0}
    for m in module.modules():
        if isinstance(m, ConvBlock):
            counts["conv_block"] += 1
        elif isinstance(m, AttentionGate):
            counts["attention_gate"] += 1
    return counts


def block_dilations(nub: NestedUNetBlock) -> tuple[int, ...]:
    """Dilations of the non-initial encoder conv blocks (encoder then bottleneck)."""
    return tuple(b.dilation for b in nub.encoder) + (nub.bottleneck.dilation,)


__all__ = [
    "AttentionGate",
    "AttentionModule",
    "ChannelAttention",
    "ConvBlock",
    "EdgeEnhancement",
    "NestedUNetBlock",
    "NubSpec",
    "block_dilations",
    "count_blocks",
    "eel_forward",
]
