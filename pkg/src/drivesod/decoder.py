"""Boundary-aware feature decoding (BFD) and the coarse-to-fine decoder."""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

SHALLOW_RATES = (1, 2, 4)
DEEP_RATES = (1, 2, 4, 8)


def stage_rates(stage: int) -> Sequence[int]:
    return DEEP_RATES if stage >= 4 else SHALLOW_RATES


@dataclass
class BfdOutput:
    fused: torch.Tensor
    m0: torch.Tensor
    m_b: torch.Tensor
    m_i: torch.Tensor


@dataclass
class PredictionBundle:
    """Per-stage confidence maps at input resolution, stage 1 first.

    ``m_b`` and ``m_i`` are None when the decoder has no BFD units.
    """

    m0: List[torch.Tensor]
    m_b: Optional[List[torch.Tensor]] = None
    m_i: Optional[List[torch.Tensor]] = None

    @property
    def has_boundary_terms(self) -> bool:
        return self.m_b is not None

    def maps(self) -> List[torch.Tensor]:
        out = list(self.m0)
        if self.has_boundary_terms:
            out += list(self.m_b) + list(self.m_i)
        return out


class ISD(nn.Module):
    """Integrated successive dilation.

    Each dilated conv consumes the (rectified) output of the previous one;
    the block returns the input plus every intermediate conv output.
    """

    def __init__(self, channels: int, rates: Sequence[int]):
        super().__init__()
        if not rates or min(rates) < 1:
            raise ValueError(f"dilation rates must be >= 1, got {list(rates)}")
        self.rates = tuple(rates)
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in self.rates)
        self.relu = nn.ReLU()

    def forward(self, x):
        out = x
        t = None
        for conv in self.convs:
            t = conv(x if t is None else self.relu(t))
            out = out + t
        return out


def isd(feats: torch.Tensor, block: ISD) -> torch.Tensor:
    return block(feats)


class BoundaryBranch(nn.Module):
    """Two 3x3 convs and a stride-2 transposed conv; outputs at twice the input size."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.up = nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1)
        self.logit = nn.Conv2d(channels, 1, 1)
        self.relu = nn.ReLU()

    def forward(self, x):
        f = self.relu(self.conv1(x))
        f = self.relu(self.conv2(f))
        f = self.up(f)
        return f, self.logit(f)


class InteriorBranch(nn.Module):
    def __init__(self, channels: int, rates: Sequence[int]):
        super().__init__()
        self.isd = ISD(channels, rates)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.logit = nn.Conv2d(channels, 1, 1)
        self.relu = nn.ReLU()

    def forward(self, x):
        f = self.conv(self.relu(self.isd(x)))
        return f, self.logit(f)


def fuse(transition, boundary, interior, m_b, m_i):
    """Confidence-gated additive fusion; single-channel maps broadcast over channels."""
    return transition + m_b * boundary + m_i * interior


class BFD(nn.Module):
    def __init__(self, channels: int, rates: Sequence[int]):
        super().__init__()
        self.boundary = BoundaryBranch(channels)
        self.transition = ISD(channels, rates)
        self.interior = InteriorBranch(channels, rates)
        self.project = nn.Conv2d(channels, 1, 1)

    def forward(self, x) -> BfdOutput:
        return bfd_forward(x, self)


def bfd_forward(feats: torch.Tensor, unit: BFD, m_b_override=None, m_i_override=None) -> BfdOutput:
    """Run one BFD unit.

    The returned ``m_b`` is at the boundary branch's native 2x size; gating
    uses its bilinear downsampling to the input size. The overrides replace
    the gating confidences, for probing the fusion.
    """
    size = feats.shape[-2:]
    f_bnd2, bnd_logits2 = unit.boundary(feats)
    f_bnd = F.interpolate(f_bnd2, size=size, mode="bilinear", align_corners=False)
    gate_b = torch.sigmoid(F.interpolate(bnd_logits2, size=size, mode="bilinear", align_corners=False))
    f_trans = unit.transition(feats)
    f_int, int_logits = unit.interior(feats)
    m_i = torch.sigmoid(int_logits)
    if m_b_override is not None:
        gate_b = m_b_override
    gate_i = m_i if m_i_override is None else m_i_override
    fused = fuse(f_trans, f_bnd, f_int, gate_b, gate_i)
    m0 = torch.sigmoid(unit.project(fused))
    return BfdOutput(fused=fused, m0=m0, m_b=torch.sigmoid(bnd_logits2), m_i=m_i)


class PlainHead(nn.Module):
    """3x3 conv to one channel; used where BFD is ablated."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


class ProgressiveDecoder(nn.Module):
    """Decodes a five-level pyramid coarse to fine, one prediction unit per stage.

    Stage ``i`` concatenates encoder features ``i`` with the decoded features
    of stage ``i + 1`` resized to stage ``i``'s size, and projects them to
    ``channels`` with a 3x3 conv to form the BFD input.
    """

    def __init__(self, encoder_channels: Sequence[int], channels: int, use_bfd: bool):
        super().__init__()
        self.use_bfd = use_bfd
        self.channels = channels
        laterals = []
        for i, c in enumerate(encoder_channels):
            in_ch = c if i == len(encoder_channels) - 1 else c + channels
            laterals.append(nn.Sequential(nn.Conv2d(in_ch, channels, 3, padding=1), nn.ReLU()))
        self.laterals = nn.ModuleList(laterals)
        if use_bfd:
            self.units = nn.ModuleList(BFD(channels, stage_rates(i + 1)) for i in range(len(encoder_channels)))
        else:
            self.units = nn.ModuleList(PlainHead(channels) for _ in encoder_channels)

    def forward(self, pyramid: Sequence[torch.Tensor], out_size) -> PredictionBundle:
        return decode_pyramid(pyramid, self, out_size)


def _up(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def decode_pyramid(pyramid: Sequence[torch.Tensor], decoder: ProgressiveDecoder, out_size) -> PredictionBundle:
    if len(pyramid) != 5:
        raise ValueError(f"expected a 5-level pyramid, got {len(pyramid)} levels")
    n = len(pyramid)
    m0: List[torch.Tensor] = [None] * n
    m_b: List[torch.Tensor] = [None] * n
    m_i: List[torch.Tensor] = [None] * n
    decoded = None
    for i in reversed(range(n)):
        x = pyramid[i]
        if decoded is not None:
            x = torch.cat([x, _up(decoded, x.shape[-2:]) if decoded.shape[-2:] != x.shape[-2:] else decoded], dim=1)
        f_d = decoder.laterals[i](x)
        unit = decoder.units[i]
        if decoder.use_bfd:
            out = unit(f_d)
            decoded = out.fused
            m0[i], m_b[i], m_i[i] = _up(out.m0, out_size), _up(out.m_b, out_size), _up(out.m_i, out_size)
        else:
            decoded = f_d
            m0[i] = _up(unit(f_d), out_size)
    if decoder.use_bfd:
        return PredictionBundle(m0=m0, m_b=m_b, m_i=m_i)
    return PredictionBundle(m0=m0)
