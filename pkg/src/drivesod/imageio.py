"""PNG reading/writing and array resizing."""

import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def list_pngs(directory):
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".png"))


def read_gray(path) -> np.ndarray:
    """8-bit grayscale PNG -> float array in [0, 1]."""
    img = Image.open(path)
    if img.mode not in ("L", "1"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def read_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def read_instance_ids(path) -> np.ndarray:
    """16-bit Cityscapes instance-id PNG -> int array."""
    return np.asarray(Image.open(path), dtype=np.int64)


def write_gray(path, arr) -> None:
    """Float map in [0, 1] -> 8-bit PNG (linear 0-255)."""
    q = np.rint(np.clip(np.asarray(arr, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), mode="L").save(path)


def write_rgb(path, arr) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


def write_instance_ids(path, ids) -> None:
    Image.fromarray(np.asarray(ids, dtype=np.uint16)).save(path)


def resize_array(arr, shape, mode="bilinear") -> np.ndarray:
    """Resize a 2-D or (H, W, C) array to ``shape`` = (H, W)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.shape[:2] == tuple(shape):
        return a.copy()
    t = torch.from_numpy(a)
    t = t[None, None] if a.ndim == 2 else t.permute(2, 0, 1)[None]
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    t = F.interpolate(t, size=tuple(shape), mode=mode, **kwargs)[0]
    return (t[0] if a.ndim == 2 else t.permute(1, 2, 0)).numpy()


def read_scene_dir(directory):
    """``images/`` and ``masks/`` PNGs matched by filename -> list of (rgb, mask)."""
    img_dir = os.path.join(directory, "images")
    mask_dir = os.path.join(directory, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise FileNotFoundError(f"{directory} needs images/ and masks/ subdirectories")
    names = list_pngs(img_dir)
    missing = sorted(set(names) ^ set(list_pngs(mask_dir)))
    if missing:
        raise FileNotFoundError("files without a counterpart: " + ", ".join(missing))
    if not names:
        raise FileNotFoundError(f"no PNG files in {img_dir}")
    return [(read_rgb(os.path.join(img_dir, n)), (read_gray(os.path.join(mask_dir, n)) > 0.5).astype(np.uint8))
            for n in names]
