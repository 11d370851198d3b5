"""Attention-based knowledge transfer from general to task-specific features.

Tensors follow the torch layout ``(..., C, H, W)``; the spatial softmax runs
over the last two axes and the channel softmax over axis ``-3``.
"""

import torch
import torch.nn as nn


def spatial_softmax(feats: torch.Tensor) -> torch.Tensor:
    """Softmax over all spatial positions, independently per channel."""
    flat = feats.flatten(-2)
    flat = flat - flat.amax(dim=-1, keepdim=True)
    e = flat.exp()
    return (e / e.sum(dim=-1, keepdim=True)).view_as(feats)


def channel_softmax_gap(feats: torch.Tensor) -> torch.Tensor:
    """Softmax over channels of the global-average-pooled features.

    Returns shape ``(..., C)``.
    """
    pooled = feats.mean(dim=(-2, -1))
    return torch.softmax(pooled - pooled.amax(dim=-1, keepdim=True), dim=-1)


def attention_map(feats: torch.Tensor) -> torch.Tensor:
    """Spatial distribution per channel times the channel distribution.

    The result is nonnegative and sums to one over ``(C, H, W)``.
    """
    return spatial_softmax(feats) * channel_softmax_gap(feats)[..., None, None]


class AKTUnit(nn.Module):
    """Adds a learned shift computed from attention-gated general features.

    The gated features are rescaled by their element count before the
    residual block, so a uniform attention map passes ``F_G`` through
    unchanged in magnitude. The last conv is zero-initialized: a fresh unit
    is the identity on the task features.
    """

    def __init__(self, channels: int, hidden: int = None):
        super().__init__()
        hidden = hidden or min(channels, 256)
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.relu = nn.ReLU()
        self.expand = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.expand.weight)
        nn.init.zeros_(self.expand.bias)

    def shift(self, general: torch.Tensor) -> torch.Tensor:
        c, h, w = general.shape[-3:]
        gated = attention_map(general) * general * (c * h * w)
        return self.expand(self.relu(self.reduce(gated)))

    def forward(self, general: torch.Tensor, task: torch.Tensor) -> torch.Tensor:
        return akt_transfer(general, task, self)


def akt_transfer(general: torch.Tensor, task: torch.Tensor, unit: AKTUnit) -> torch.Tensor:
    if general.shape != task.shape:
        raise ValueError(f"general features {tuple(general.shape)} and task features "
                         f"{tuple(task.shape)} differ in shape")
    return task + unit.shift(general)
