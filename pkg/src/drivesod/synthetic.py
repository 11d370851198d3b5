"""Synthetic scenes and on-disk fixtures for offline runs and tests.

``task`` scenes mimic a driving view: sky, buildings, a road trapezoid with
vehicles on it (salient) and parked vehicles at the sides (not salient).
``general`` scenes hold one centred blob, like conventional SOD data.
"""

import csv
import os
from typing import List, Tuple

import numpy as np

from .imageio import write_instance_ids, write_mask, write_rgb

SKY = (135, 170, 210)
BUILDING = (120, 110, 100)
ROAD = (60, 60, 65)
SIDEWALK = (170, 160, 150)
ON_ROAD_CAR = (230, 200, 40)
PARKED_CAR = (40, 90, 200)


def _road_mask(h, w, horizon, top_half, bottom_half, centre):
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    t = np.clip((rows - horizon) / max(h - 1 - horizon, 1), 0, 1)
    half = top_half + (bottom_half - top_half) * t
    return (rows >= horizon) & (np.abs(cols - centre) <= half)


def task_scene(rng: np.random.Generator, size=(32, 64)):
    """One driving-like image and its salient mask (road plus on-road vehicles)."""
    h, w = size
    img = np.zeros((h, w, 3), dtype=np.float64)
    horizon = int(rng.integers(h * 3 // 8, h // 2 + 1))
    img[:horizon] = SKY
    img[horizon:] = SIDEWALK
    bld_top = int(rng.integers(h // 8, horizon - 1))
    img[bld_top:horizon, : w // 3] = BUILDING
    img[bld_top + 1:horizon, 2 * w // 3:] = BUILDING
    centre = w / 2 + rng.uniform(-w / 16, w / 16)
    road = _road_mask(h, w, horizon, rng.uniform(w / 32, w / 16), rng.uniform(w / 4, w / 3), centre)
    img[road] = ROAD
    salient = road.copy()

    ch, cw = max(2, h // 8), max(3, w // 10)
    y = int(rng.integers(horizon + 1, h - ch - 1))
    x = int(np.clip(centre + rng.uniform(-w / 16, w / 16) - cw / 2, 0, w - cw))
    img[y:y + ch, x:x + cw] = ON_ROAD_CAR
    salient[y:y + ch, x:x + cw] = True

    for side in (0, 1):
        if rng.random() < 0.7:
            py = int(rng.integers(horizon, h - ch))
            px = int(rng.integers(0, w // 8)) if side == 0 else int(rng.integers(w - w // 8 - cw, w - cw))
            if not salient[py:py + ch, px:px + cw].any():
                img[py:py + ch, px:px + cw] = PARKED_CAR
    img += rng.normal(0, 6, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), salient.astype(np.uint8)


def general_scene(rng: np.random.Generator, size=(32, 64)):
    """One centre-biased blob on a flat background."""
    h, w = size
    bg = rng.uniform(40, 215, 3)
    fg = 255 - bg + rng.normal(0, 10, 3)
    cy = h / 2 + rng.normal(0, h / 10)
    cx = w / 2 + rng.normal(0, w / 10)
    ry = rng.uniform(h / 6, h / 3)
    rx = rng.uniform(w / 8, w / 4)
    rows, cols = np.mgrid[0:h, 0:w]
    mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, 6, (h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8), mask.astype(np.uint8)


def synthetic_scenes(n: int, size=(32, 64), seed: int = 0, domain: str = "task") -> List[Tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    make = {"task": task_scene, "general": general_scene}[domain]
    return [make(rng, size) for _ in range(n)]


def write_scene_dir(out_dir, scenes, prefix="img") -> None:
    """``images/<id>.png`` and ``masks/<id>.png`` pairs, the training-set layout."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for i, (img, mask) in enumerate(scenes):
        name = f"{prefix}_{i:03d}.png"
        write_rgb(os.path.join(out_dir, "images", name), img)
        write_mask(os.path.join(out_dir, "masks", name), mask)


def cityscapes_like(rng: np.random.Generator, size=(48, 96)):
    """Instance-id map in the gtFine encoding, an image, and gaze points.

    Fixations fall on the road and on the vehicle ahead; sparse ones land
    on a parked car and the sky.
    """
    h, w = size
    ids = np.full((h, w), 23, dtype=np.int64)  # sky
    horizon = h // 2
    ids[horizon - h // 6:horizon, :] = 11  # building
    ids[horizon:, :] = 8  # sidewalk
    road = _road_mask(h, w, horizon, w / 16, w / 3, w / 2)
    ids[road] = 7
    ids[h - h // 10:, w // 4: 3 * w // 4] = 1  # ego vehicle (void)
    car_h, car_w = h // 8, w // 10
    ahead = (horizon + h // 6, int(w / 2 - car_w / 2 + rng.integers(-2, 3)))
    ids[ahead[0]:ahead[0] + car_h, ahead[1]:ahead[1] + car_w] = 26001
    parked = (horizon + h // 5, 2)
    ids[parked[0]:parked[0] + car_h, parked[1]:parked[1] + car_w] = 26002
    ped = (horizon - 2, w - w // 12)
    ids[ped[0]:ped[0] + h // 6, ped[1]:ped[1] + 2] = 24001

    palette = {23: SKY, 11: BUILDING, 8: SIDEWALK, 7: ROAD, 1: (20, 20, 20),
               26001: ON_ROAD_CAR, 26002: PARKED_CAR, 24001: (200, 60, 60)}
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for k, c in palette.items():
        img[ids == k] = c

    fix = []
    road_rows, road_cols = np.nonzero(ids == 7)
    for _ in range(6):
        j = int(rng.integers(len(road_rows)))
        fix.append((road_cols[j] + 0.5, road_rows[j] + 0.5, float(rng.integers(100, 300))))
    for _ in range(10):
        fix.append((ahead[1] + car_w / 2 + rng.uniform(-1, 1), ahead[0] + car_h / 2 + rng.uniform(-1, 1),
                    float(rng.integers(300, 600))))
    fix.append((parked[1] + 1.0, parked[0] + 1.0, 100.0))
    fix.append((w / 2, 2.0, 80.0))
    return img, ids, fix


def write_cityscapes_fixture(out_dir, n: int = 3, size=(48, 96), seed: int = 7) -> List[str]:
    """Writes ``images/``, ``instances/`` and ``fixations.csv``; returns image ids."""
    rng = np.random.default_rng(seed)
    for sub in ("images", "instances"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    ids_out = []
    with open(os.path.join(out_dir, "fixations.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x", "y", "duration_ms"])
        for i in range(n):
            image_id = f"city_{i:03d}"
            img, ids, fix = cityscapes_like(rng, size)
            write_rgb(os.path.join(out_dir, "images", image_id + ".png"), img)
            write_instance_ids(os.path.join(out_dir, "instances", image_id + ".png"), ids)
            for x, y, d in fix:
                writer.writerow([image_id, f"{x:.2f}", f"{y:.2f}", f"{d:g}"])
            ids_out.append(image_id)
    return ids_out


def write_eval_fixture(out_dir, n: int = 5, size=(32, 64), seed: int = 11) -> None:
    """``gt/`` masks and noisy ``pred/`` maps with matching filenames."""
    from .imageio import write_gray

    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pred"), exist_ok=True)
    for i, (_, mask) in enumerate(synthetic_scenes(n, size, seed, "task")):
        name = f"eval_{i:03d}.png"
        write_mask(os.path.join(out_dir, "gt", name), mask)
        pred = np.clip(0.8 * mask + 0.1 + rng.normal(0, 0.15, mask.shape), 0, 1)
        write_gray(os.path.join(out_dir, "pred", name), pred)


def write_all_fixtures(root) -> None:
    write_cityscapes_fixture(os.path.join(root, "cityscapes_mini"))
    write_scene_dir(os.path.join(root, "task_mini"), synthetic_scenes(8, seed=1, domain="task"), "task")
    write_scene_dir(os.path.join(root, "general_mini"), synthetic_scenes(8, seed=2, domain="general"), "gen")
    write_eval_fixture(os.path.join(root, "eval_mini"))


if __name__ == "__main__":
    import sys

    write_all_fixtures(sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "fixtures"))
