"""Boundary/interior ground truths and the multi-stage BCE objective."""

from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn.functional as F

from .decoder import PredictionBundle

EPS = 1e-7
# 2 px at the 256x512 training resolution, scaled with image width.
REFERENCE_WIDTH = 512
REFERENCE_BAND = 2


def band_width_for(width: int) -> int:
    return max(1, int(round(REFERENCE_BAND * width / REFERENCE_WIDTH)))


def bce_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Pixel-mean binary cross-entropy with ``pred`` clamped to [eps, 1 - eps]."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != ground-truth shape {tuple(gt.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    gt = gt.to(p.dtype)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def _dilate(mask: torch.Tensor, width: int) -> torch.Tensor:
    return F.max_pool2d(mask, 2 * width + 1, stride=1, padding=width)


def _erode(mask: torch.Tensor, width: int) -> torch.Tensor:
    # pixels outside the image count as background
    inv = F.pad(1.0 - mask, (width,) * 4, value=1.0)
    return 1.0 - F.max_pool2d(inv, 2 * width + 1, stride=1)


@dataclass
class GroundTruthTriple:
    g0: torch.Tensor
    g_b: torch.Tensor
    g_i: torch.Tensor


def derive_boundary_interior(g0: torch.Tensor, width: int = 1):
    """Boundary band (dilation minus erosion) and interior (erosion) of ``g0``.

    Square structuring element of side ``2 * width + 1``. Accepts (H, W),
    (N, H, W) or (N, 1, H, W) masks and returns the same shape.
    """
    if width < 1:
        raise ValueError("band width must be >= 1")
    shape = g0.shape
    m = (g0 > 0.5).to(torch.float64 if g0.dtype == torch.float64 else torch.float32)
    m = m.reshape(-1, 1, *shape[-2:])
    eroded = _erode(m, width)
    band = _dilate(m, width) - eroded
    return band.reshape(shape), eroded.reshape(shape)


def ground_truth_triple(g0: torch.Tensor, width: int = None) -> GroundTruthTriple:
    width = width or band_width_for(g0.shape[-1])
    g_b, g_i = derive_boundary_interior(g0, width)
    return GroundTruthTriple(g0=(g0 > 0.5).to(g_b.dtype), g_b=g_b, g_i=g_i)


def loss_terms(bundle: PredictionBundle, gt: GroundTruthTriple) -> Dict[str, torch.Tensor]:
    """Every individual BCE term, keyed like ``m0_1`` or ``mb_3``."""
    for name in ("m0", "m_b", "m_i") if bundle.has_boundary_terms else ("m0",):
        maps = getattr(bundle, name)
        if len(maps) != 5 or any(m is None for m in maps):
            raise ValueError(f"prediction bundle is missing stages for {name}")
    terms = {}
    for i in range(5):
        terms[f"m0_{i + 1}"] = bce_loss(bundle.m0[i], gt.g0.to(bundle.m0[i].dtype))
        if bundle.has_boundary_terms:
            terms[f"mb_{i + 1}"] = bce_loss(bundle.m_b[i], gt.g_b.to(bundle.m_b[i].dtype))
            terms[f"mi_{i + 1}"] = bce_loss(bundle.m_i[i], gt.g_i.to(bundle.m_i[i].dtype))
    return terms


def total_loss(bundle: PredictionBundle, g0, width: int = None) -> torch.Tensor:
    """Unweighted sum over five stages of the saliency, boundary and interior terms.

    ``g0`` is either a (N, 1, H, W) mask or a precomputed GroundTruthTriple.
    Bundles without boundary maps contribute only the saliency terms.
    """
    gt = g0 if isinstance(g0, GroundTruthTriple) else ground_truth_triple(g0, width)
    return sum(loss_terms(bundle, gt).values())
