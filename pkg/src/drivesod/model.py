"""Dual-subnetwork saliency model: general encoder -> AKT -> task encoder -> decoder."""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import PredictionBundle, ProgressiveDecoder, decode_pyramid
from .encoder import (
    TINY_CHANNELS,
    ResNet50Encoder,
    build_encoder,
    encode,
    tiny_stage_specs,
)
from .transfer import AKTUnit, akt_transfer

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Sub-seed offsets: components share a seed across ablations, so e.g. the
# Baseline and Baseline + AKT models start with identical task weights.
_SEED_OFFSETS = {"general_encoder": 0, "general_decoder": 1, "task_encoder": 2, "decoder": 3, "akt": 4}

PARAM_GROUPS = ("general", "akt", "task", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    use_akt: bool = True
    use_bfd: bool = True
    use_pretrained_general: bool = False
    encoder_scale: str = "tiny"
    input_height: int = 32
    input_width: int = 64
    stage_channels: Tuple[int, ...] = TINY_CHANNELS
    blocks_per_stage: int = 2
    decoder_channels: int = 16

    def __post_init__(self):
        if self.encoder_scale not in ("tiny", "resnet50"):
            raise ValueError(f"encoder_scale must be 'tiny' or 'resnet50', got {self.encoder_scale!r}")
        if self.input_height <= 0 or self.input_width <= 0:
            raise ValueError("input size must be positive")
        if self.input_height % 8 or self.input_width % 8:
            raise ValueError(f"input size {self.input_height}x{self.input_width} must be divisible by 8")
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels needs 5 entries")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))

    @property
    def input_size(self) -> Tuple[int, int]:
        return self.input_height, self.input_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ablation variants: (use_akt, use_bfd, use_pretrained_general)
ABLATIONS = {
    "Baseline": (False, False, False),
    "Baseline + PT": (False, False, True),
    "Baseline + AKT": (True, False, False),
    "Baseline + BFD": (False, True, False),
    "Ours": (True, True, False),
}


def ablation_config(name: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    akt, bfd, pt = ABLATIONS[name]
    return replace(base or ModelConfig(), use_akt=akt, use_bfd=bfd, use_pretrained_general=pt)


def _seeded(seed, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


class SaliencyModel(nn.Module):
    """Holds both subnetworks.

    The general subnetwork always exists (it carries its own plain decoder
    for pretraining), so ablations differ only by AKT units and BFD heads.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed

        def sub(name):
            return seed * 10 + _SEED_OFFSETS[name]

        if config.encoder_scale == "tiny":
            specs = tiny_stage_specs(config.stage_channels, config.blocks_per_stage)
            self.general_encoder = build_encoder(specs, sub("general_encoder"))
            self.task_encoder = build_encoder(specs, sub("task_encoder"))
        else:
            self.general_encoder = _seeded(sub("general_encoder"), ResNet50Encoder)
            self.task_encoder = _seeded(sub("task_encoder"), ResNet50Encoder)
        channels = self.task_encoder.out_channels
        self.general_decoder = _seeded(
            sub("general_decoder"), lambda: ProgressiveDecoder(channels, config.decoder_channels, use_bfd=False))
        self.decoder = _seeded(
            sub("decoder"), lambda: ProgressiveDecoder(channels, config.decoder_channels, use_bfd=config.use_bfd))
        self.akt = None
        if config.use_akt:
            self.akt = _seeded(sub("akt"), lambda: nn.ModuleList(AKTUnit(c) for c in channels[:4]))

    def param_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        """Named parameters split into general, akt, task and decoder collections."""
        groups = {
            "general": [("general_encoder." + n, p) for n, p in self.general_encoder.named_parameters()]
            + [("general_decoder." + n, p) for n, p in self.general_decoder.named_parameters()],
            "akt": [("akt." + n, p) for n, p in self.akt.named_parameters()] if self.akt is not None else [],
            "task": [("task_encoder." + n, p) for n, p in self.task_encoder.named_parameters()],
            "decoder": [("decoder." + n, p) for n, p in self.decoder.named_parameters()],
        }
        return groups

    def forward(self, images):
        return forward(self, images)


def build_model(config: ModelConfig, seed: int = 0) -> SaliencyModel:
    return SaliencyModel(config, seed)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def task_pyramid(model: SaliencyModel, images: torch.Tensor) -> List[torch.Tensor]:
    """Task-encoder features, with each AKT shift added before the next stage."""
    stride = model.task_encoder.stride
    h, w = images.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"input size {h}x{w} is not divisible by the cumulative stride {stride}")
    feats = []
    g = images
    t = images
    for i, stage in enumerate(model.task_encoder.stages):
        t = stage(t)
        if model.akt is not None and i < 4:
            g = model.general_encoder.stages[i](g)
            t = akt_transfer(g, t, model.akt[i])
        feats.append(t)
    return feats


def forward(model: SaliencyModel, images: torch.Tensor) -> PredictionBundle:
    """All per-stage confidence maps, each resized to the input resolution."""
    return decode_pyramid(task_pyramid(model, images), model.decoder, images.shape[-2:])


def forward_general(model: SaliencyModel, images: torch.Tensor) -> PredictionBundle:
    """Predictions of the general subnetwork through its plain decoder."""
    return decode_pyramid(encode(model.general_encoder, images), model.general_decoder, images.shape[-2:])


def to_tensor(image) -> torch.Tensor:
    """(H, W), (H, W, 1) or (H, W, 3) array -> normalized (1, 3, H, W) float tensor.

    uint8 input is scaled to [0, 1]; float input is assumed to be in [0, 1].
    """
    arr = np.asarray(image)
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    arr = arr.astype(np.float32) / scale
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"unsupported image shape {np.asarray(image).shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (t - mean) / std


def resize(x: torch.Tensor, size, mode="bilinear") -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x, size=tuple(size), mode="nearest")
    return F.interpolate(x, size=tuple(size), mode=mode, align_corners=False)


@torch.no_grad()
def infer(model: SaliencyModel, image) -> np.ndarray:
    """Saliency map from the finest task stage, at the image's original size."""
    x = to_tensor(image)
    x = x.to(next(model.parameters()).dtype)
    orig = x.shape[-2:]
    x = resize(x, model.config.input_size)
    was_training = model.training
    model.eval()
    bundle = forward(model, x)
    model.train(was_training)
    out = resize(bundle.m0[0], orig)
    return out[0, 0].clamp(0.0, 1.0).cpu().numpy().astype(np.float64)


CHECKPOINT_FORMAT = "drivesod-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SaliencyModel, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra,
    }
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> SaliencyModel:
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(payload["config"])
    if expected is not None and expected != config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected}")
    model = build_model(config, payload["seed"])
    model.load_state_dict(payload["params"])
    return model


def load_into(model: SaliencyModel, path) -> SaliencyModel:
    payload = read_checkpoint(path)
    if ModelConfig.from_dict(payload["config"]) != model.config:
        raise CheckpointError("checkpoint config does not match the model config")
    model.load_state_dict(payload["params"])
    return model
