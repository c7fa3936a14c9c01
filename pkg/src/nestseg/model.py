"""Outer encoder-decoder assembling nested UNet blocks, channel attention,
attention fusion and the edge enhancement head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import ops
from .blocks import (
    AttentionModule,
    ChannelAttention,
    ConvBlock,
    EdgeEnhancement,
    NestedUNetBlock,
    NubSpec,
)
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor, no_grad, trace_ops

N_STAGES = 5


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    base_channels: int = 8
    channel_multiplier: int = 2
    channel_cap: int = 8
    nub_schedule: tuple[int, ...] = (7, 6, 5, 4, 4)
    use_bridge: bool = True
    inner_attention: bool = True
    use_am: bool = True
    use_cam: bool = True
    use_eel: bool = True
    eel_mode: str = "residual"
    eel_lambda: float = 0.1
    upsample_mode: str = "bilinear"
    attention_cap: int = 4096
    leaky_alpha: float = 0.01
    cam_reduction: int = 4

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.nub_schedule = tuple(int(v) for v in self.nub_schedule)

    # -- derived geometry -----------------------------------------------------

    def stage_widths(self) -> list[int]:
        return [self.base_channels * min(self.channel_multiplier ** s, self.channel_cap)
                for s in range(N_STAGES)]

    def required_divisor(self) -> int:
        """Smallest number both input sides must be divisible by."""
        div = 2 ** N_STAGES
        for s, depth in enumerate(self.nub_schedule):
            div = int(np.lcm(div, 2 ** s * 2 ** (depth - 2)))
        return div

    def validate(self) -> None:
        if len(self.input_size) != 2:
            raise ValueError(f"input_size must be (H, W), got {self.input_size}")
        if len(self.nub_schedule) != N_STAGES:
            raise ValueError(f"nub_schedule needs {N_STAGES} entries, got {self.nub_schedule}")
        if any(d < 4 for d in self.nub_schedule):
            raise ValueError(f"NUB variants must be >= 4, got {self.nub_schedule}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be positive")
        if self.eel_mode not in ("residual", "magnitude"):
            raise ValueError(f"eel_mode must be 'residual' or 'magnitude', got {self.eel_mode!r}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"upsample_mode must be 'bilinear' or 'nearest', got {self.upsample_mode!r}")
        div = self.required_divisor()
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} must be divisible by {div} for NUB schedule {list(self.nub_schedule)}")

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["nub_schedule"] = list(self.nub_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {unknown}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def with_toggles(self, **toggles: bool) -> "ModelConfig":
        return dataclasses.replace(self, **toggles)


TOGGLES = ("inner_attention", "use_am", "use_cam", "use_eel")


class NestedUNet(Module):
    """Five-stage encoder/decoder of nested UNet blocks with side outputs.

    Encoder stage: NUB -> CAM -> (skip) -> maxpool. Decoder stage: upsample ->
    attention fusion with the skip (or concat + conv block) -> NUB -> 1x1 side
    head. The five side maps are resized to full resolution, averaged,
    edge-enhanced and squashed with a sigmoid.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        cfg = config
        widths = cfg.stage_widths()
        a = cfg.leaky_alpha

        self.enc = ModuleList()
        self.cam = ModuleList() if cfg.use_cam else None
        prev = cfg.in_channels
        for s in range(N_STAGES):
            spec = NubSpec(cfg.nub_schedule[s], prev, widths[s], inner_attention=cfg.inner_attention)
            self.enc.append(NestedUNetBlock(spec, rng, cfg.upsample_mode, a))
            if self.cam is not None:
                self.cam.append(ChannelAttention(widths[s], rng, cfg.cam_reduction, a))
            prev = widths[s]

        if cfg.use_bridge:
            spec = NubSpec(4, prev, widths[-1], is_bridge=True, inner_attention=cfg.inner_attention)
            self.bridge = NestedUNetBlock(spec, rng, cfg.upsample_mode, a)
        else:
            self.bridge = None

        self.fuse = ModuleList()
        self.dec = ModuleList()
        self.side = ModuleList()
        deep = widths[-1]
        for s in reversed(range(N_STAGES)):
            skip = widths[s]
            if cfg.use_am:
                self.fuse.append(AttentionModule(skip, deep, rng, cfg.attention_cap, a))
                fused = skip + deep
            else:
                self.fuse.append(ConvBlock(skip + deep, skip, rng, alpha=a))
                fused = skip
            spec = NubSpec(cfg.nub_schedule[s], fused, skip, inner_attention=cfg.inner_attention)
            self.dec.append(NestedUNetBlock(spec, rng, cfg.upsample_mode, a))
            self.side.append(Conv2d(skip, 1, 1, rng, init="linear"))
            deep = skip

        self.eel = EdgeEnhancement(cfg.eel_mode, cfg.eel_lambda) if cfg.use_eel else None

    def forward(self, x: Tensor, return_aux: bool = False):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.input_size:
            raise ValueError(
                f"input shape {x.shape} does not match config (N, {cfg.in_channels}, "
                f"{cfg.input_size[0]}, {cfg.input_size[1]})"
            )
        skips = []
        h = x
        for s in range(N_STAGES):
            h = self.enc[s](h)
            if self.cam is not None:
                h = self.cam[s](h)
            skips.append(h)
            h = ops.maxpool2(h)
        if self.bridge is not None:
            h = self.bridge(h)

        sides = []
        for i, s in enumerate(reversed(range(N_STAGES))):
            up = ops.upsample2(h, cfg.upsample_mode)
            skip = skips[s]
            if cfg.use_am:
                f = self.fuse[i](skip, up)
            else:
                f = self.fuse[i](ops.concat([skip, up], axis=1))
            h = self.dec[i](f)
            side = self.side[i](h)
            if side.shape[2:] != x.shape[2:]:
                side = ops.resize_bilinear(side, cfg.input_size)
            sides.append(side)

        fused = sides[0]
        for sm in sides[1:]:
            fused = fused + sm
        fused = fused * (1.0 / len(sides))
        logits = self.eel(fused) if self.eel is not None else fused
        probs = ops.sigmoid(logits)
        if return_aux:
            return {"sides": sides, "fused": fused, "logits": logits, "probs": probs}
        return probs

    def describe(self) -> str:
        cfg = self.config
        widths = cfg.stage_widths()
        h, w = cfg.input_size
        lines = []
        for s in range(N_STAGES):
            cam = " + CAM" if cfg.use_cam else ""
            lines.append(f"enc{s + 1}: NUB-{cfg.nub_schedule[s]}{cam} @ {h >> s}x{w >> s}, {widths[s]} ch")
        if cfg.use_bridge:
            lines.append(f"bridge: NUB-bridge @ {h >> N_STAGES}x{w >> N_STAGES}, {widths[-1]} ch")
        for s in reversed(range(N_STAGES)):
            fuse = "AM" if cfg.use_am else "concat+conv"
            lines.append(f"dec{s + 1}: up + {fuse} + NUB-{cfg.nub_schedule[s]} @ {h >> s}x{w >> s}, {widths[s]} ch -> side")
        lines.append("head: mean(sides)" + (f" -> EEL[{cfg.eel_mode}]" if cfg.use_eel else "") + " -> sigmoid")
        return "\n".join(lines)


def build(config: ModelConfig, seed: int = 0) -> NestedUNet:
    """Construct a model with HeUniform weights drawn from ``seed``."""
    return NestedUNet(config, np.random.default_rng(seed))


def count_params(model: Module) -> int:
    """Trainable element count (batchnorm running statistics excluded)."""
    return model.num_parameters()


def estimate_flops(model: Module, input_shape: Optional[tuple[int, ...]] = None) -> int:
    """Multiply-accumulate count of one forward pass.

    Convs count ``N*Cout*H'*W'*Cin*k^2/groups``, dense layers and attention
    products count their matmul dims. Runs a value-free trace in inference
    mode and restores the previous mode afterwards.
    """
    if input_shape is None:
        cfg = model.config
        input_shape = (1, cfg.in_channels, *cfg.input_size)
    modes = [(m, m.training) for m in model.modules()]
    saved_cfg = getattr(model, "config", None)
    x = Tensor(np.zeros(input_shape, dtype=np.float32))
    try:
        model.eval()
        if saved_cfg is not None and tuple(input_shape[2:]) != saved_cfg.input_size:
            # trace at a different resolution without rebuilding
            model.config = dataclasses.replace(saved_cfg, input_size=tuple(input_shape[2:]))
        with no_grad(), trace_ops() as tr:
            model(x)
    finally:
        if saved_cfg is not None:
            model.config = saved_cfg
        for m, mode in modes:
            object.__setattr__(m, "training", mode)
    return tr.total_macs

