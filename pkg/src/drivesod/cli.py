"""Command-line entry point: ``drivesod <subcommand> ...``.

Every subcommand that produces files writes them under ``--out`` together
with ``manifest.json`` (resolved config, inputs, seed, library versions).
Failures print one JSON line on stderr, e.g.
``{"error": "data", "exit": 3, "message": "..."}``.
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import Callable, Dict, Tuple

import numpy as np
import torch

from . import __version__
from .dataset import (
    SELECT_RATIO,
    FixationSet,
    aam,
    build_ground_truth,
    dataset_stats,
    plot_stats,
    read_fixation_csv,
    write_score_csv,
)
from .imageio import list_pngs, read_gray, read_instance_ids, read_rgb, read_scene_dir, write_gray, write_mask
from .metrics import evaluate
from .model import ABLATIONS, CheckpointError, ModelConfig, ablation_config, build_model, infer, load_checkpoint, \
    read_checkpoint, save_checkpoint, to_tensor
from .registry import FIELDS, BenchmarkRegistry, registry_compare
from .synthetic import synthetic_scenes
from .training import TrainConfig, TrainingDiverged, grad_check, train_general, train_task

log = logging.getLogger("drivesod")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---- config values --------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _size(text: str) -> Tuple[int, int]:
    """``HxW``, e.g. ``32x64``."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    h, w = (int(p) for p in parts)
    if h <= 0 or w <= 0:
        raise ValueError(f"size must be positive, got {text!r}")
    return h, w


def _optional_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _ablation(text: str) -> str:
    for name in ABLATIONS:
        if name.lower() == text.strip().lower():
            return name
    raise ValueError(f"unknown ablation {text!r}; choose from {', '.join(ABLATIONS)}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


Key = Tuple[Callable[[str], object], str]

MODEL_KEYS: Dict[str, Key] = {
    "ablation": (_ablation, "Ours"),
    "encoder_scale": (_choice("tiny", "resnet50"), "tiny"),
    "decoder_channels": (int, "16"),
    "model_seed": (int, "0"),
}

TRAIN_KEYS: Dict[str, Key] = {
    "profile": (_choice("desk", "full"), "desk"),
    "learning_rate": (float, "1e-3"),
    "head_lr_multiplier": (float, "10"),
    "weight_decay": (float, "5e-4"),
    "momentum": (float, "0.9"),
    "batch_size": (int, "4"),
    "iterations": (_optional_float, "auto"),
    "resolution": (lambda t: None if t == "auto" else _size(t), "auto"),
    "flip": (_bool, "true"),
    "seed": (int, "0"),
    "checkpoint_fraction": (float, "0.1"),
    "log_every": (int, "1"),
}

SCHEMAS: Dict[str, Dict[str, Key]] = {
    "build-dataset": {"sigma": (_optional_float, "auto"), "ratio": (float, str(SELECT_RATIO))},
    "stats": {"area_bins": (int, "10"), "aam_size": (lambda t: None if t == "auto" else _size(t), "auto")},
    "train-general": {**MODEL_KEYS, **TRAIN_KEYS},
    "train-task": {**MODEL_KEYS, **TRAIN_KEYS},
    "infer": {},
    "evaluate": {},
    "benchmark": {},
    "grad-check": {
        **MODEL_KEYS,
        "resolution": (_size, "16x32"),
        "batch_size": (int, "1"),
        "epsilon": (float, "1e-5"),
        "samples_per_group": (int, "200"),
        "floor": (float, "1e-6"),
        "tolerance": (float, "1e-3"),
        "randomize_akt": (_bool, "true"),
        "seed": (int, "0"),
    },
}


def read_config_file(path) -> Dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in out:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def resolve_config(command: str, file_values: Dict[str, str], overrides) -> Dict[str, object]:
    schema = SCHEMAS[command]
    raw = {k: default for k, (_, default) in schema.items()}
    merged = dict(file_values)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        merged[k.strip()] = v.strip()
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        allowed = ", ".join(sorted(schema)) or "none"
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)} (allowed: {allowed})")
    raw.update(merged)
    resolved = {}
    for k, (parse, _) in schema.items():
        try:
            resolved[k] = parse(raw[k])
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {exc}") from None
    return resolved


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out_dir, command: str, config: Dict[str, object], inputs: Dict[str, str], **extra) -> str:
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(config.items())},
        "inputs": {k: os.path.abspath(v) if v else None for k, v in sorted(inputs.items())},
        "versions": {"drivesod": __version__, "torch": torch.__version__, "numpy": np.__version__},
        **extra,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---- subcommands ----------------------------------------------------------

def _require_dir(path, what):
    if not os.path.isdir(path):
        raise DataError(f"{what} directory not found: {path}")


def cmd_build_dataset(args, cfg):
    _require_dir(args.instances, "instances")
    if not os.path.isfile(args.fixations):
        raise DataError(f"fixation CSV not found: {args.fixations}")
    if not 0 < cfg["ratio"] <= 1:
        raise UsageError("ratio must be in (0, 1]")
    names = list_pngs(args.instances)
    if not names:
        raise DataError(f"no instance PNGs in {args.instances}")
    fixations = read_fixation_csv(args.fixations)
    mask_dir = os.path.join(args.out, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    tables, masks, rejected = [], [], 0
    image_ids = [os.path.splitext(n)[0] for n in names]
    for image_id, name in zip(image_ids, names):
        ids = read_instance_ids(os.path.join(args.instances, name))
        fix = fixations.get(image_id, FixationSet(image_id))
        if not fix.points:
            log.warning("%s: no fixations, mask will be empty", image_id)
        density, table, mask = build_ground_truth(image_id, ids, fix, cfg["sigma"], cfg["ratio"])
        rejected += density.rejected
        write_mask(os.path.join(mask_dir, name), mask)
        tables.append(table)
        masks.append(mask)
    write_score_csv(os.path.join(args.out, "scores.csv"), tables)
    unmatched = sorted(set(fixations) - set(image_ids))
    write_manifest(args.out, "build-dataset", cfg, {"instances": args.instances, "fixations": args.fixations},
                   summary={"images": len(names), "rejected_fixations": rejected, "unmatched_fixation_ids": unmatched})
    print(f"images={len(names)} selected={sum(len(t.selected_ids()) for t in tables)} "
          f"rejected_fixations={rejected} out={mask_dir}")
    return EXIT_OK


def cmd_stats(args, cfg):
    _require_dir(args.masks, "mask")
    names = list_pngs(args.masks)
    if not names:
        raise DataError(f"no mask PNGs in {args.masks}")
    masks = [read_gray(os.path.join(args.masks, n)) > 0.5 for n in names]
    os.makedirs(args.out, exist_ok=True)
    stats = dataset_stats(masks, cfg["area_bins"])
    stats.write_csv(os.path.join(args.out, "stats.csv"))
    with open(os.path.join(args.out, "per_image.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "objects", "area_fraction"])
        for n, c, a in zip(names, stats.counts, stats.areas):
            w.writerow([n, int(c), repr(float(a))])
    shape = cfg["aam_size"] or masks[0].shape
    write_gray(os.path.join(args.out, "aam.png"), aam(masks, shape))
    plot_stats(stats, args.out)
    write_manifest(args.out, "stats", cfg, {"masks": args.masks})
    print(f"images={len(names)} mean_objects={stats.counts.mean():.3f} mean_area={stats.areas.mean():.4f}")
    return EXIT_OK


def _model_config(cfg, resolution) -> ModelConfig:
    base = ModelConfig(encoder_scale=cfg["encoder_scale"], input_height=resolution[0], input_width=resolution[1],
                       decoder_channels=cfg["decoder_channels"])
    return ablation_config(cfg["ablation"], base)


def _train_config(stage, cfg) -> TrainConfig:
    fields = {k: cfg[k] for k in ("learning_rate", "head_lr_multiplier", "weight_decay", "momentum", "batch_size",
                                  "flip", "seed", "checkpoint_fraction", "log_every")}
    if cfg["iterations"] is not None:
        fields["iterations"] = int(cfg["iterations"])
    if cfg["resolution"] is not None:
        fields["resolution"] = cfg["resolution"]
    if cfg["profile"] == "desk":
        return TrainConfig.desk(stage, **fields)
    return TrainConfig(stage=stage, **fields)


def _build_for_training(stage, cfg):
    tcfg = _train_config(stage, cfg)
    try:
        mcfg = _model_config(cfg, tcfg.resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tcfg, build_model(mcfg, cfg["model_seed"])


def _load_scenes(path):
    try:
        return read_scene_dir(path)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(str(exc)) from None


def cmd_train_general(args, cfg):
    data = _load_scenes(args.data)
    tcfg, model = _build_for_training("general", cfg)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "train-general", cfg, {"data": args.data}, train_config=tcfg.to_dict(),
                   model_config=model.config.to_dict())
    result = train_general(tcfg, data, model, out_dir=args.out)
    path = os.path.join(args.out, "general.pt")
    save_checkpoint(path, model, stage="general", iteration=tcfg.iterations)
    print(f"probe_loss {result.probe_initial:.4f} -> {result.probe_final:.4f} checkpoint={path}")
    return EXIT_OK


def cmd_train_task(args, cfg):
    data = _load_scenes(args.data)
    tcfg, model = _build_for_training("task", cfg)
    general = None
    if args.general:
        payload = read_checkpoint(args.general)
        general = {k: v for k, v in payload["params"].items() if k.startswith(("general_encoder.", "general_decoder."))}
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "train-task", cfg, {"data": args.data, "general": args.general},
                   train_config=tcfg.to_dict(), model_config=model.config.to_dict())
    try:
        result = train_task(tcfg, data, model, general, out_dir=args.out)
    except ValueError as exc:
        if "general" in str(exc):
            raise DataError(str(exc)) from None
        raise
    path = os.path.join(args.out, "model.pt")
    save_checkpoint(path, model, stage="task", iteration=tcfg.iterations, general_hash=result.general_hash_after)
    print(f"probe_loss {result.probe_initial:.4f} -> {result.probe_final:.4f} "
          f"general_hash={result.general_hash_after[:16]} checkpoint={path}")
    return EXIT_OK


def cmd_infer(args, cfg):
    _require_dir(args.images, "image")
    model = load_checkpoint(args.checkpoint)
    names = list_pngs(args.images)
    if not names:
        raise DataError(f"no PNG images in {args.images}")
    os.makedirs(args.out, exist_ok=True)
    for n in names:
        write_gray(os.path.join(args.out, n), infer(model, read_rgb(os.path.join(args.images, n))))
    write_manifest(args.out, "infer", cfg, {"checkpoint": args.checkpoint, "images": args.images},
                   model_config=model.config.to_dict())
    print(f"images={len(names)} out={args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    _require_dir(args.pred, "prediction")
    _require_dir(args.gt, "ground-truth")
    report = evaluate(args.pred, args.gt)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    write_manifest(args.out, "evaluate", cfg, {"pred": args.pred, "gt": args.gt},
                   summary={**report.as_row(), "n_images": report.n_images, "skipped": report.skipped})
    print(report.to_text())
    return EXIT_OK


def read_report_csv(path) -> Dict[str, float]:
    """The ``mean`` row of a metrics.csv written by ``evaluate``."""
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row.get("image") == "mean":
                    return {k: float(row[k]) for k in FIELDS}
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc.strerror}") from None
    except (KeyError, ValueError):
        raise DataError(f"{path} is not a metrics.csv from evaluate") from None
    raise DataError(f"{path} has no mean row")


def cmd_benchmark(args, cfg):
    registry = BenchmarkRegistry.from_csv(args.registry) if args.registry else BenchmarkRegistry.default()
    try:
        row = registry.get(args.method, args.phase)
    except KeyError as exc:
        raise DataError(exc.args[0]) from None
    lines = [f"method={row.method} phase={row.phase} " + " ".join(f"{k}={v}" for k, v in zip(FIELDS, row.raw))]
    deltas = None
    if args.report:
        measured = read_report_csv(args.report)
        deltas = registry_compare(measured, registry, args.method, args.phase)
        lines.append("measured " + " ".join(f"{k}={measured[k]:.4f}" for k in FIELDS))
        lines.append("delta " + " ".join(f"{k}={deltas[k]:+.4f}" for k in FIELDS))
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, "benchmark", cfg, {"report": args.report, "registry": args.registry},
                       method=row.method, phase=row.phase, registry_row=row.values(), deltas=deltas)
    return EXIT_OK


def cmd_grad_check(args, cfg):
    h, w = cfg["resolution"]
    try:
        mcfg = _model_config(cfg, (h, w))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = build_model(mcfg, cfg["model_seed"])
    if cfg["randomize_akt"] and model.akt is not None:
        # the zero-initialized residual output would otherwise hide AKT gradients
        gen = torch.Generator().manual_seed(cfg["seed"])
        with torch.no_grad():
            for unit in model.akt:
                unit.expand.weight.copy_(0.1 * torch.randn(unit.expand.weight.shape, generator=gen))
    scenes = synthetic_scenes(cfg["batch_size"], size=(h, w), seed=cfg["seed"])
    x = torch.cat([to_tensor(img) for img, _ in scenes]).double()
    g0 = torch.stack([torch.from_numpy(m.astype(np.float64))[None] for _, m in scenes])
    res = grad_check(model, x, g0, epsilon=cfg["epsilon"], samples_per_group=cfg["samples_per_group"],
                     seed=cfg["seed"], floor=cfg["floor"])
    passed = res.max_rel_error < cfg["tolerance"]
    for g, err in res.per_group.items():
        print(f"group={g} checked={res.n_checked[g]} kinks_skipped={res.kinks_skipped.get(g, 0)} max_rel_error={err:.3e}")
    print(f"max_rel_error={res.max_rel_error:.3e} tolerance={cfg['tolerance']:g} {'PASS' if passed else 'FAIL'}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
        json.dump({"max_rel_error": res.max_rel_error, "per_group": res.per_group, "n_checked": res.n_checked,
                   "worst": list(res.worst), "kinks_skipped": res.kinks_skipped, "passed": passed}, fh, indent=2)
    write_manifest(args.out, "grad-check", cfg, {})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "stats": cmd_stats,
    "train-general": cmd_train_general,
    "train-task": cmd_train_task,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "grad-check": cmd_grad_check,
}


# ---- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


FORMATS = """\
file formats:
  fixation CSV     header image_id,x,y,duration_ms; x,y in pixels (0 <= x < W), duration > 0
  instance PNG     16-bit Cityscapes gtFine ids (class*1000+index, or class id for stuff)
  masks            8-bit PNG, 0 background / 255 salient
  saliency maps    8-bit PNG, value = round(255 * p)
  scene dirs       images/<name>.png (RGB) and masks/<name>.png with matching names
  config file      one "key = value" per line, "#" comments; --set key=value overrides it

exit codes: 0 ok, 1 grad-check above tolerance, 2 usage, 3 data, 4 training diverged.
errors go to stderr as one JSON line: {"error": kind, "exit": code, "message": text}
"""


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drivesod", description="Task-aware salient object detection toolkit.",
                     epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_keys_help(name) + "\n" + FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("build-dataset", "Salient-object masks from fixations and instance ids.")
    p.add_argument("--instances", required=True, help="directory of instance-id PNGs")
    p.add_argument("--fixations", required=True, help="fixation CSV")

    p = add("stats", "Object-count and area histograms plus the average annotation map.")
    p.add_argument("--masks", required=True, help="directory of binary mask PNGs")

    p = add("train-general", "Stage 1: train the general subnetwork on conventional SOD data.")
    p.add_argument("--data", required=True, help="scene dir with images/ and masks/")

    p = add("train-task", "Stage 2: train transfer units, task encoder and decoder with the general part frozen.")
    p.add_argument("--data", required=True, help="scene dir with images/ and masks/")
    p.add_argument("--general", help="checkpoint from train-general (required unless ablation is Baseline "
                                     "or Baseline + BFD)")

    p = add("infer", "Saliency maps for a directory of images.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)

    p = add("evaluate", "MAE, F_beta, weighted F_beta and S-measure over matching PNGs.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = add("benchmark", "Print a reference benchmark row, optionally against an evaluate report.",
            out_required=False)
    p.add_argument("--method", required=True)
    p.add_argument("--phase", default="after", choices=["before", "after"])
    p.add_argument("--report", help="metrics.csv written by evaluate")
    p.add_argument("--registry", help="alternative registry CSV")

    add("grad-check", "Compare backprop gradients of the training loss with finite differences.")
    return parser


def _keys_help(command) -> str:
    schema = SCHEMAS[command]
    if not schema:
        return "config keys: none"
    return "config keys (default):\n" + "\n".join(f"  {k} ({d})" for k, (_, d) in schema.items())


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, args.set)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except TrainingDiverged as exc:
        return _fail("diverged", EXIT_DIVERGED, exc)
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        return _fail("data", EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
