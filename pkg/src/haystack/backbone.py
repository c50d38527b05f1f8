"""Receptive-field-controlled bottleneck encoders.

Three named schedules restrict how many bottleneck blocks per stage keep a
3x3 middle convolution; every other middle convolution is 1x1 and widened
by 2.5x to compensate for the lost parameters. All widths are scaled
uniformly by the capacity factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn as nn
import torch.nn.functional as F

BASE_WIDTHS = (64, 128, 256, 512)
STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_STRIDES = (2, 2, 2, 1)
EXPANSION = 4
WIDEN = Fraction(5, 2)
STEM_WIDTH = 64

# number of leading blocks per stage that keep a 3x3 middle convolution
KERNEL3_BLOCKS = {
    9: (1, 1, 0, 0),
    33: (1, 1, 1, 1),
    177: (3, 4, 6, 3),
}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    width: int
    stride: int = 1


@dataclass(frozen=True)
class BlockSpec:
    convs: tuple[ConvSpec, ConvSpec, ConvSpec]

    @property
    def stride(self) -> int:
        return max(c.stride for c in self.convs)

    @property
    def out_width(self) -> int:
        return self.convs[-1].width


@dataclass(frozen=True)
class LayerSchedule:
    stem: tuple[ConvSpec, ...]
    stages: tuple[tuple[BlockSpec, ...], ...]

    def main_path(self) -> list[ConvSpec]:
        """Convolutions along the non-skip path, in order."""
        layers = list(self.stem)
        for stage in self.stages:
            for block in stage:
                layers.extend(block.convs)
        return layers

    @property
    def total_stride(self) -> int:
        return math.prod(c.stride for c in self.main_path())

    @property
    def out_width(self) -> int:
        return self.stages[-1][-1].out_width if self.stages else self.stem[-1].width


def scale_width(width: int | Fraction, scale: Fraction) -> int:
    """Round half up, never below one channel."""
    return max(1, math.floor(Fraction(width) * scale + Fraction(1, 2)))


def make_schedule(rf: int, scale: Fraction | float | str = 1) -> LayerSchedule:
    if rf not in KERNEL3_BLOCKS:
        raise ValueError(f"unknown receptive-field schedule {rf!r}; expected one of {sorted(KERNEL3_BLOCKS)}")
    scale = as_scale(scale)
    stem = (
        ConvSpec(1, scale_width(STEM_WIDTH, scale)),
        ConvSpec(3, scale_width(STEM_WIDTH, scale)),
    )
    stages = []
    for base, n_blocks, stride, n_k3 in zip(BASE_WIDTHS, STAGE_BLOCKS, STAGE_STRIDES, KERNEL3_BLOCKS[rf]):
        blocks = []
        for b in range(n_blocks):
            kernel = 3 if b < n_k3 else 1
            mid = base if kernel == 3 else base * WIDEN
            blocks.append(BlockSpec((
                ConvSpec(1, scale_width(base, scale)),
                ConvSpec(kernel, scale_width(mid, scale), stride if b == 0 else 1),
                ConvSpec(1, scale_width(base * EXPANSION, scale)),
            )))
        stages.append(tuple(blocks))
    return LayerSchedule(stem, tuple(stages))


def receptive_field_of(schedule: LayerSchedule) -> int:
    rf, jump = 1, 1
    for conv in schedule.main_path():
        rf += (conv.kernel - 1) * jump
        jump *= conv.stride
    return rf


def as_scale(value: Fraction | float | int | str) -> Fraction:
    scale = Fraction(value).limit_denominator(1 << 16) if not isinstance(value, Fraction) else value
    if scale <= 0:
        raise ValueError(f"capacity scale must be positive, got {value!r}")
    return scale


@dataclass(frozen=True)
class ArchitectureSpec:
    rf: int = 33
    scale: Fraction = Fraction(1)
    norm: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "scale", as_scale(self.scale))
        if self.rf not in KERNEL3_BLOCKS:
            raise ValueError(f"unknown receptive-field schedule {self.rf!r}")
        if self.norm != "instance":
            raise ValueError("only instance normalization is supported")

    @property
    def schedule(self) -> LayerSchedule:
        return make_schedule(self.rf, self.scale)

    def to_json(self) -> dict:
        return {"rf": self.rf, "scale": str(self.scale), "norm": self.norm}

    @classmethod
    def from_json(cls, data: dict) -> "ArchitectureSpec":
        return cls(rf=int(data["rf"]), scale=as_scale(data.get("scale", 1)), norm=data.get("norm", "instance"))


def instance_normalize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardize each (sample, channel) plane over its spatial positions."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class InstanceNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        x = instance_normalize(x, self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def conv(in_ch: int, spec: ConvSpec) -> nn.Conv2d:
    return nn.Conv2d(in_ch, spec.width, spec.kernel, stride=spec.stride, padding=spec.kernel // 2, bias=False)


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, spec: BlockSpec, project: bool):
        super().__init__()
        c1, c2, c3 = spec.convs
        self.conv1, self.norm1 = conv(in_ch, c1), InstanceNorm(c1.width)
        self.conv2, self.norm2 = conv(c1.width, c2), InstanceNorm(c2.width)
        self.conv3, self.norm3 = conv(c2.width, c3), InstanceNorm(c3.width)
        self.shortcut = None
        if project:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, c3.width, 1, stride=spec.stride, bias=False),
                InstanceNorm(c3.width),
            )

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Encoder(nn.Module):
    """Maps images [B, C, H, W] to the spatial embedding [B, c_enc, H/8, W/8]."""

    def __init__(self, spec: ArchitectureSpec, in_channels: int = 1):
        super().__init__()
        self.spec = spec
        schedule = spec.schedule
        self.total_stride = schedule.total_stride
        self.out_channels = schedule.out_width

        layers = []
        ch = in_channels
        for c in schedule.stem:
            layers += [conv(ch, c), InstanceNorm(c.width), nn.ReLU()]
            ch = c.width
        self.stem = nn.Sequential(*layers)

        stages = []
        for stage in schedule.stages:
            blocks = []
            for i, block in enumerate(stage):
                blocks.append(Bottleneck(ch, block, project=(i == 0)))
                ch = block.out_width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        reset_parameters(self)

    def forward(self, x):
        if x.shape[-1] < self.total_stride or x.shape[-2] < self.total_stride:
            raise ShapeError(
                f"input {tuple(x.shape[-2:])} smaller than the encoder stride {self.total_stride}")
        return self.stages(self.stem(x))


def reset_parameters(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")


def build_encoder(spec: ArchitectureSpec, in_channels: int = 1) -> Encoder:
    return Encoder(spec, in_channels)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
