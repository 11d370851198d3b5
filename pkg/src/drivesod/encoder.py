"""Five-stage residual feature extractors used by both subnetworks."""

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn


@dataclass(frozen=True)
class EncoderStageSpec:
    index: int
    stride: int
    dilation: int
    out_channels: int
    num_blocks: int = 2


# Cumulative stride 8: stages 4 and 5 keep stride 1 and dilate by 2 and 4,
# so stages 3, 4 and 5 share one spatial size.
STAGE_STRIDES = (2, 2, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 1, 2, 4)
TINY_CHANNELS = (16, 32, 64, 64, 64)
RESNET50_CHANNELS = (64, 256, 512, 1024, 2048)
RESNET50_BLOCKS = (1, 3, 4, 6, 3)


def tiny_stage_specs(channels: Sequence[int] = TINY_CHANNELS, num_blocks: int = 2) -> List[EncoderStageSpec]:
    return [
        EncoderStageSpec(i + 1, STAGE_STRIDES[i], STAGE_DILATIONS[i], int(channels[i]), num_blocks)
        for i in range(5)
    ]


def resnet50_stage_specs() -> List[EncoderStageSpec]:
    return [
        EncoderStageSpec(i + 1, STAGE_STRIDES[i], STAGE_DILATIONS[i], RESNET50_CHANNELS[i], RESNET50_BLOCKS[i])
        for i in range(5)
    ]


def validate_stage_specs(specs: Sequence[EncoderStageSpec], strict: bool = False) -> None:
    if len(specs) != 5:
        raise ValueError(f"expected 5 encoder stages, got {len(specs)}")
    for i, s in enumerate(specs):
        if s.index != i + 1:
            raise ValueError(f"stage {i + 1} has index {s.index}")
        if min(s.stride, s.dilation, s.out_channels, s.num_blocks) < 1:
            raise ValueError(f"stage {s.index} has a nonpositive dimension: {s}")
    if specs[4].stride != 1:
        raise ValueError("stage 5 must have stride 1")
    for a, b in zip(specs, specs[1:]):
        if b.out_channels < a.out_channels:
            raise ValueError("stage channels must be nondecreasing")
    if strict and (specs[3].dilation, specs[4].dilation) != (2, 4):
        raise ValueError("stages 4 and 5 must dilate by 2 and 4")


def cumulative_stride(specs: Sequence[EncoderStageSpec]) -> int:
    out = 1
    for s in specs:
        out *= s.stride
    return out


def group_norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else (4 if channels % 4 == 0 else 1)
    return nn.GroupNorm(groups, channels)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, padding=dilation, dilation=dilation, bias=False)
        self.norm1 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, padding=dilation, dilation=dilation, bias=False)
        self.norm2 = group_norm(out_ch)
        self.relu = nn.ReLU()
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), group_norm(out_ch))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + identity)


class ResidualEncoder(nn.Module):
    """Stack of five residual stages mapping an image batch to a feature pyramid.

    Stage ``i`` is ``num_blocks`` basic blocks; the first block carries the
    stage stride and a projection shortcut when the shape changes.
    """

    def __init__(self, specs: Sequence[EncoderStageSpec], in_channels: int = 3):
        super().__init__()
        validate_stage_specs(specs)
        self.specs = list(specs)
        stages = []
        ch = in_channels
        for s in self.specs:
            blocks = [BasicBlock(ch, s.out_channels, s.stride, s.dilation)]
            blocks += [BasicBlock(s.out_channels, s.out_channels, 1, s.dilation) for _ in range(s.num_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            ch = s.out_channels
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self) -> List[int]:
        return [s.out_channels for s in self.specs]

    @property
    def stride(self) -> int:
        return cumulative_stride(self.specs)

    def forward(self, x) -> List[torch.Tensor]:
        return encode(self, x)


class ResNet50Encoder(nn.Module):
    """torchvision ResNet-50 without pooling/fc, dilated so the output stride is 8.

    Weights start random; pretrained ImageNet weights are loaded by the caller
    through :meth:`load_torchvision_state`.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        self.specs = resnet50_stage_specs()
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu),
            nn.Sequential(net.maxpool, net.layer1),
            net.layer2,
            net.layer3,
            net.layer4,
        ])

    @property
    def out_channels(self) -> List[int]:
        return list(RESNET50_CHANNELS)

    @property
    def stride(self) -> int:
        return cumulative_stride(self.specs)

    def load_torchvision_state(self, state_dict) -> None:
        prefix = {"conv1": "0.0", "bn1": "0.1", "layer1": "1.1", "layer2": "2", "layer3": "3", "layer4": "4"}
        mapped = {}
        for key, value in state_dict.items():
            head, _, rest = key.partition(".")
            if head in ("fc",):
                continue
            mapped[f"stages.{prefix[head]}.{rest}"] = value
        self.load_state_dict(mapped)

    def forward(self, x) -> List[torch.Tensor]:
        return encode(self, x)


def build_encoder(specs: Sequence[EncoderStageSpec], init_seed: int) -> ResidualEncoder:
    """Build a residual encoder with deterministic initialization.

    The global torch RNG state is left untouched.
    """
    validate_stage_specs(specs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return ResidualEncoder(specs)


def encode(encoder, images: torch.Tensor) -> List[torch.Tensor]:
    """Run ``images`` (N, 3, H, W) through all five stages, finest first."""
    if images.dim() != 4:
        raise ValueError(f"expected an (N, C, H, W) batch, got shape {tuple(images.shape)}")
    h, w = images.shape[-2:]
    stride = encoder.stride
    if h % stride or w % stride:
        raise ValueError(f"input size {h}x{w} is not divisible by the cumulative stride {stride}")
    feats = []
    x = images
    for stage in encoder.stages:
        x = stage(x)
        feats.append(x)
    return feats
