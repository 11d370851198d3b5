"""Two-stage training: general-subnetwork pretraining, then frozen-general task training."""

import copy
import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .model import SaliencyModel, forward, forward_general, save_checkpoint, to_tensor
from .supervision import ground_truth_triple, loss_terms, total_loss

log = logging.getLogger(__name__)

FULL_ITERATIONS = {"general": 50_000, "task": 200_000}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; defaults are the full-scale protocol.

    ``resolution`` is (height, width).
    """

    stage: str = "task"
    learning_rate: float = 1e-3
    head_lr_multiplier: float = 10.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 4
    iterations: Optional[int] = None
    resolution: Tuple[int, int] = (256, 512)
    flip: bool = True
    seed: int = 0
    checkpoint_fraction: float = 0.1
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in FULL_ITERATIONS:
            raise ValueError(f"stage must be 'general' or 'task', got {self.stage!r}")
        if self.iterations is None:
            object.__setattr__(self, "iterations", FULL_ITERATIONS[self.stage])
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    @classmethod
    def desk(cls, stage: str, **overrides) -> "TrainConfig":
        """CPU-sized profile: 32x64 inputs and a short run."""
        base = dict(stage=stage, resolution=(32, 64), iterations=200 if stage == "general" else 1500)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def augment(image, mask, flip_draw: bool, resolution):
    """Resize an aligned (image, mask) pair and optionally mirror both.

    Returns a normalized (3, H, W) image tensor and a (1, H, W) float mask.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} are not aligned")
    x = to_tensor(image)
    m = torch.from_numpy((mask > 0).astype(np.float32))[None, None]
    size = tuple(resolution)
    if tuple(x.shape[-2:]) != size:
        x = torch.nn.functional.interpolate(x, size=size, mode="bilinear", align_corners=False)
        m = torch.nn.functional.interpolate(m, size=size, mode="nearest")
    if flip_draw:
        x = x.flip(-1)
        m = m.flip(-1)
    return x[0], m[0]


def param_hash(named_params) -> str:
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def general_hash(model: SaliencyModel) -> str:
    return param_hash(model.param_groups()["general"] + _general_buffers(model))


def _general_buffers(model):
    return [("general_encoder." + n, b) for n, b in model.general_encoder.named_buffers()]


def general_state(model: SaliencyModel) -> Dict[str, torch.Tensor]:
    return {n: t.detach().clone() for n, t in model.state_dict().items()
            if n.startswith(("general_encoder.", "general_decoder."))}


def load_general_state(model: SaliencyModel, state: Dict[str, torch.Tensor]) -> None:
    missing = model.load_state_dict(state, strict=False)
    unexpected = [k for k in missing.unexpected_keys]
    absent = [k for k in missing.missing_keys if k.startswith(("general_encoder.", "general_decoder."))]
    if unexpected or absent:
        raise ValueError(f"general state mismatch: unexpected={unexpected[:3]} missing={absent[:3]}")


def optimizer_groups(model: SaliencyModel, stage: str, lr: float, head_multiplier: float):
    """Backbone (encoder) parameters at ``lr``; every other trained group at ``lr * head_multiplier``."""
    groups = model.param_groups()
    if stage == "general":
        backbone = [p for n, p in groups["general"] if n.startswith("general_encoder.")]
        heads = [p for n, p in groups["general"] if n.startswith("general_decoder.")]
        names = {"backbone": "general_encoder", "heads": "general_decoder"}
    else:
        backbone = [p for _, p in groups["task"]]
        heads = [p for _, p in groups["akt"]] + [p for _, p in groups["decoder"]]
        names = {"backbone": "task_encoder", "heads": "akt+decoder"}
    return [
        {"params": backbone, "lr": lr, "name": names["backbone"]},
        {"params": heads, "lr": lr * head_multiplier, "name": names["heads"]},
    ]


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")
    checkpoints: List[str] = field(default_factory=list)
    general_hash_before: Optional[str] = None
    general_hash_after: Optional[str] = None
    general_state: Optional[Dict[str, torch.Tensor]] = None


def _batches(n: int, batch_size: int, iterations: int, rng: np.random.Generator, flip: bool):
    """Yields (indices, flip draws); reshuffles at every pass over the data."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            idx.append(int(order[pos]))
            pos += 1
        flips = rng.random(batch_size) < 0.5 if flip else np.zeros(batch_size, dtype=bool)
        yield idx, flips


def _stack(dataset, idx, flips, resolution, dtype):
    pairs = [augment(dataset[i][0], dataset[i][1], bool(f), resolution) for i, f in zip(idx, flips)]
    x = torch.stack([p[0] for p in pairs]).to(dtype)
    m = torch.stack([p[1] for p in pairs]).to(dtype)
    return x, m


def _loss_fn(model, stage):
    if stage == "general":
        return lambda x, gt: loss_terms(forward_general(model, x), gt)
    return lambda x, gt: loss_terms(forward(model, x), gt)


def _run(model: SaliencyModel, config: TrainConfig, dataset, out_dir=None, tag="") -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.SGD(
        optimizer_groups(model, config.stage, config.learning_rate, config.head_lr_multiplier),
        lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)
    terms_of = _loss_fn(model, config.stage)

    n_probe = min(config.batch_size, len(dataset))
    probe_x, probe_m = _stack(dataset, list(range(n_probe)), [False] * n_probe, config.resolution, dtype)
    probe_gt = ground_truth_triple(probe_m)

    def probe():
        with torch.no_grad():
            return float(sum(terms_of(probe_x, probe_gt).values()))

    result = TrainResult(probe_initial=probe())
    writer = None
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, f"train_log{tag}.csv"), "a", newline="")
        writer = csv.writer(log_fh)
    every = max(1, int(math.ceil(config.iterations * config.checkpoint_fraction))) if config.iterations else 1
    try:
        for it, (idx, flips) in enumerate(_batches(len(dataset), config.batch_size, config.iterations, rng, config.flip), 1):
            x, m = _stack(dataset, idx, flips, config.resolution, dtype)
            terms = terms_of(x, ground_truth_triple(m))
            loss = sum(terms.values())
            value = float(loss.detach())
            if not math.isfinite(value):
                bad = {k: float(v.detach()) for k, v in terms.items() if not math.isfinite(float(v.detach()))}
                raise TrainingDiverged(f"non-finite loss at iteration {it} ({config.stage} stage): {bad}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.losses.append(value)
            if writer is not None:
                if it == 1 and log_fh.tell() == 0:
                    writer.writerow(["iteration", "loss"] + list(terms))
                if it % config.log_every == 0 or it == config.iterations:
                    writer.writerow([it, repr(value)] + [repr(float(v.detach())) for v in terms.values()])
            if out_dir is not None and (it % every == 0 or it == config.iterations):
                path = os.path.join(out_dir, f"checkpoint{tag}_{it:07d}.pt")
                save_checkpoint(path, model, stage=config.stage, iteration=it)
                result.checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.probe_final = probe()
    return result


def train_general(config: TrainConfig, dataset, model: SaliencyModel, out_dir=None) -> TrainResult:
    """Trains the general encoder and its plain decoder on a conventional SOD set.

    ``dataset`` is a sequence of (image, mask) arrays. The trained general
    parameters are returned in ``result.general_state``.
    """
    if config.stage != "general":
        raise ValueError("train_general needs a config with stage='general'")
    groups = model.param_groups()
    for _, p in groups["akt"] + groups["task"] + groups["decoder"]:
        p.requires_grad_(False)
    for _, p in groups["general"]:
        p.requires_grad_(True)
    model.train()
    try:
        result = _run(model, config, dataset, out_dir, tag="_general")
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    result.general_state = general_state(model)
    return result


def train_task(config: TrainConfig, dataset, model: SaliencyModel, general=None, out_dir=None) -> TrainResult:
    """Trains AKT, the task encoder and the decoder under the staged objective.

    The general subnetwork is loaded from ``general`` (a state dict from
    :func:`train_general` or a checkpoint) and frozen. With
    ``use_pretrained_general`` the task encoder starts from the general
    encoder's weights instead.
    """
    if config.stage != "task":
        raise ValueError("train_task needs a config with stage='task'")
    needs_general = model.config.use_akt or model.config.use_pretrained_general
    if general is not None:
        load_general_state(model, general)
    elif needs_general:
        raise ValueError("missing general parameters: run train_general first or pass a checkpoint")
    if model.config.use_pretrained_general:
        model.task_encoder.load_state_dict(model.general_encoder.state_dict())
    groups = model.param_groups()
    for _, p in groups["general"]:
        p.requires_grad_(False)
    for _, p in groups["akt"] + groups["task"] + groups["decoder"]:
        p.requires_grad_(True)
    model.train()
    model.general_encoder.eval()
    model.general_decoder.eval()
    before = general_hash(model)
    result = _run(model, config, dataset, out_dir, tag="_task")
    result.general_hash_before = before
    result.general_hash_after = general_hash(model)
    if before != result.general_hash_after:
        raise AssertionError("general subnetwork changed during task training")
    return result


def train_two_stage(general_cfg: TrainConfig, task_cfg: TrainConfig, general_data, task_data,
                    model: SaliencyModel, out_dir=None):
    """Stage 1 then stage 2. Stage 1 is skipped when the model never reads the general subnetwork."""
    first = None
    state = None
    if model.config.use_akt or model.config.use_pretrained_general:
        first = train_general(general_cfg, general_data, model, out_dir)
        state = first.general_state
    second = train_task(task_cfg, task_data, model, state, out_dir)
    return first, second


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: Dict[str, float]
    n_checked: Dict[str, int]
    worst: Tuple[str, int, float, float] = ("", -1, 0.0, 0.0)
    kinks_skipped: Dict[str, int] = field(default_factory=dict)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class _ReluPattern:
    """Records the on/off pattern of every ReLU during a forward pass."""

    def __init__(self, model):
        self.masks: List[torch.Tensor] = []
        self.handles = [mod.register_forward_hook(self._hook)
                        for mod in model.modules() if isinstance(mod, torch.nn.ReLU)]

    def _hook(self, module, inputs, output):
        self.masks.append(inputs[0] > 0)

    def take(self) -> List[torch.Tensor]:
        out, self.masks = self.masks, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(u, v) for u, v in zip(a, b))


def grad_check(model: SaliencyModel, images: torch.Tensor, g0: torch.Tensor, epsilon: float = 1e-5,
               samples_per_group: int = 200, groups: Sequence[str] = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckResult:
    """Compares backprop gradients of the staged loss with central differences.

    Runs on a float64 copy of ``model``; ``samples_per_group`` entries are
    drawn without replacement from each parameter group (all of them when
    the group is smaller). A draw whose +/- epsilon probes switch any ReLU
    on or off straddles a kink, where the difference quotient does not
    estimate the derivative; such draws are counted in ``kinks_skipped``
    and replaced by the next draw.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    x = images.double()
    gt = ground_truth_triple(g0.double())
    for p in m.parameters():
        p.requires_grad_(True)
    pattern = _ReluPattern(m)

    def loss_value():
        with torch.no_grad():
            return float(total_loss(forward(m, x), gt)), pattern.take()

    try:
        m.zero_grad()
        total_loss(forward(m, x), gt).backward()
        base = pattern.take()
        rng = np.random.default_rng(seed)
        per_group, counts, kinks = {}, {}, {}
        worst = ("", -1, 0.0, 0.0)
        worst_err = -1.0
        all_groups = m.param_groups()
        for gname in groups or PARAM_GROUPS_ORDER:
            named = all_groups[gname]
            if not named:
                continue
            sizes = np.array([p.numel() for _, p in named])
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            gmax, checked, skipped = 0.0, 0, 0
            for flat in rng.permutation(int(offsets[-1])):
                if checked == samples_per_group:
                    break
                t = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, p = named[t]
                j = int(flat - offsets[t])
                analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
                with torch.no_grad():
                    orig = float(p.view(-1)[j])
                    p.view(-1)[j] = orig + epsilon
                    up, up_pattern = loss_value()
                    p.view(-1)[j] = orig - epsilon
                    down, down_pattern = loss_value()
                    p.view(-1)[j] = orig
                if not (_same_pattern(base, up_pattern) and _same_pattern(base, down_pattern)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * epsilon)
                err = relative_error(analytic, numeric, floor)
                gmax = max(gmax, err)
                checked += 1
                if err > worst_err:
                    worst_err, worst = err, (name, j, analytic, numeric)
            per_group[gname] = gmax
            counts[gname] = checked
            kinks[gname] = skipped
    finally:
        pattern.close()
    return GradCheckResult(max(per_group.values()) if per_group else 0.0, per_group, counts, worst, kinks)


PARAM_GROUPS_ORDER = ("general", "akt", "task", "decoder")
