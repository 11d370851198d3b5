"""Saliency evaluation: MAE, max F-measure, weighted F-measure and S-measure.

Predictions are float maps in [0, 1]; ground truths are binary masks.
The weighted F-measure and S-measure follow the reference MATLAB protocols
(Margolin et al. 2014; Fan et al. 2017).
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

BETA2 = 0.3
WFB_BETA2 = 1.0
WFB_SIGMA = 5.0
WFB_WINDOW = 7
SM_ALPHA = 0.5
_EPS = np.finfo(np.float64).eps


class DegenerateGroundTruth(ValueError):
    """Ground truth with no foreground; the image is skipped for F-measures."""


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.abs(pred - gt).mean())


def quantize(pred) -> np.ndarray:
    """Map [0, 1] predictions to integer levels 0..255."""
    return np.rint(np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.int64)


def f_beta_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    """F-measure at each threshold t = 1..255 on the 8-bit quantized map."""
    pred, gt = _check(pred, gt)
    n_pos = gt.sum()
    if n_pos == 0:
        raise DegenerateGroundTruth("ground truth has no foreground")
    q = quantize(pred)
    fg_hist = np.bincount(q[gt], minlength=256)
    bg_hist = np.bincount(q[~gt], minlength=256)
    # counts of pixels with level >= t, for t = 0..255
    tp = np.cumsum(fg_hist[::-1])[::-1][1:].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1][1:].astype(np.float64)
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / n_pos
    denom = beta2 * precision + recall
    return np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def f_beta(pred, gt, beta2: float = BETA2) -> float:
    return float(f_beta_curve(pred, gt, beta2).max())


def _gaussian_kernel(size=WFB_WINDOW, sigma=WFB_SIGMA) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def _offsets_with_sq_norm(v: int):
    out = []
    r = int(np.floor(np.sqrt(v)))
    for dy in range(-r, r + 1):
        rem = v - dy * dy
        dx = int(round(np.sqrt(rem)))
        if dx * dx == rem:
            out.extend([(dy, -dx), (dy, dx)] if dx else [(dy, 0)])
    return sorted(set(out))


def nearest_foreground(gt: np.ndarray):
    """Euclidean distance to, and index of, the nearest foreground pixel.

    Ties go to the foreground pixel first in raster order, which makes the
    result independent of the distance-transform implementation.
    """
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    dist = ndimage.distance_transform_edt(~gt)
    d2 = np.rint(dist * dist).astype(np.int64)
    rows_idx, cols_idx = np.indices(gt.shape)
    near_r, near_c = rows_idx.copy(), cols_idx.copy()
    bg = ~gt
    for v in np.unique(d2[bg]):
        rows, cols = np.nonzero(bg & (d2 == v))
        todo = np.ones(len(rows), dtype=bool)
        for dy, dx in _offsets_with_sq_norm(int(v)):
            rr, cc = rows + dy, cols + dx
            ok = todo & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            ok[ok] = gt[rr[ok], cc[ok]]
            near_r[rows[ok], cols[ok]] = rr[ok]
            near_c[rows[ok], cols[ok]] = cc[ok]
            todo &= ~ok
            if not todo.any():
                break
    return dist, near_r, near_c


def weighted_f_beta(pred, gt, beta2: float = WFB_BETA2) -> float:
    pred, gt = _check(pred, gt)
    if not gt.any():
        raise DegenerateGroundTruth("ground truth has no foreground")
    err = np.abs(pred - gt)
    dist, near_r, near_c = nearest_foreground(gt)
    # background pixels borrow the error of their nearest foreground pixel
    et = err[near_r, near_c]
    et[gt] = err[gt]
    ea = ndimage.correlate(et, _gaussian_kernel(), mode="constant", cval=0.0)
    min_e = err.copy()
    better = gt & (ea < err)
    min_e[better] = ea[better]
    importance = np.ones_like(err)
    importance[~gt] = 2.0 - np.exp(np.log(0.5) / 5.0 * dist[~gt])
    ew = min_e * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (_EPS + tpw + fpw)
    return float((1 + beta2) * recall * precision / (_EPS + recall + beta2 * precision))


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + _EPS)


def _s_object(pred, gt) -> float:
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1.0 - pred, 0.0)
    u = gt.mean()
    return u * _object_score(fg[gt]) + (1 - u) * _object_score(bg[~gt])


def _centroid(gt):
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    rows, cols = np.nonzero(gt)
    # 1-based mean rounded half up, as in the reference implementation
    x = int(np.floor(cols.mean() + 1 + 0.5))
    y = int(np.floor(rows.mean() + 1 + 0.5))
    return x, y


def _ssim(pred, gt) -> float:
    n = pred.size
    x = pred.mean()
    y = gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(pred, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    g = gt.astype(np.float64)
    quads = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    score = 0.0
    for rs, cs in quads:
        p, q = pred[rs, cs], g[rs, cs]
        if p.size == 0:
            continue
        score += p.size / area * _ssim(p, q)
    return score


def s_measure(pred, gt, alpha: float = SM_ALPHA) -> float:
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    q = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(max(q, 0.0))


METRIC_NAMES = ("mae", "weighted_f_beta", "f_beta", "s_measure")


@dataclass
class MetricReport:
    mae: float
    f_beta: float
    weighted_f_beta: float
    s_measure: float
    n_images: int
    skipped: List[str] = field(default_factory=list)
    per_image: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        return {"mae": self.mae, "f_w_beta": self.weighted_f_beta, "f_beta": self.f_beta, "s_m": self.s_measure}

    def to_text(self) -> str:
        lines = [
            f"images: {self.n_images}",
            f"MAE: {self.mae:.4f}",
            f"F^w_beta: {self.weighted_f_beta:.4f}",
            f"F_beta: {self.f_beta:.4f}",
            f"S_m: {self.s_measure:.4f}",
        ]
        if self.skipped:
            lines.append(f"skipped for F-measures (empty ground truth): {len(self.skipped)}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "mae", "f_w_beta", "f_beta", "s_m"])
            for name in sorted(self.per_image):
                m = self.per_image[name]
                writer.writerow([name] + [_fmt(m.get(k)) for k in ("mae", "weighted_f_beta", "f_beta", "s_measure")])
            writer.writerow(["mean", _fmt(self.mae), _fmt(self.weighted_f_beta), _fmt(self.f_beta), _fmt(self.s_measure)])


def _fmt(v):
    return "" if v is None else repr(float(v))


def image_metrics(pred, gt) -> Dict[str, Optional[float]]:
    out = {"mae": mae(pred, gt), "s_measure": s_measure(pred, gt)}
    try:
        out["f_beta"] = f_beta(pred, gt)
        out["weighted_f_beta"] = weighted_f_beta(pred, gt)
    except DegenerateGroundTruth:
        out["f_beta"] = out["weighted_f_beta"] = None
    return out


def aggregate(per_image: Dict[str, Dict[str, Optional[float]]]) -> MetricReport:
    if not per_image:
        raise ValueError("no images to evaluate")
    names = sorted(per_image)
    skipped = [n for n in names if per_image[n]["f_beta"] is None]
    kept = [n for n in names if n not in skipped]

    def mean(key, pool):
        vals = [per_image[n][key] for n in pool]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricReport(
        mae=mean("mae", names),
        s_measure=mean("s_measure", names),
        f_beta=mean("f_beta", kept),
        weighted_f_beta=mean("weighted_f_beta", kept),
        n_images=len(names),
        skipped=skipped,
        per_image=per_image,
    )


def evaluate(pred_dir, gt_dir) -> MetricReport:
    """Average per-image metrics over PNG files matched by filename.

    Predictions are resized to the ground-truth size when they differ.
    """
    from .imageio import list_pngs, read_gray, resize_array

    preds = list_pngs(pred_dir)
    gts = list_pngs(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise FileNotFoundError("files without a counterpart: " + ", ".join(missing))
    if not gts:
        raise FileNotFoundError(f"no PNG files in {gt_dir}")
    per_image = {}
    for name in sorted(gts):
        gt = read_gray(os.path.join(gt_dir, name)) > 0.5
        pred = read_gray(os.path.join(pred_dir, name))
        if pred.shape != gt.shape:
            pred = resize_array(pred, gt.shape)
        per_image[name] = image_metrics(pred, gt)
    return aggregate(per_image)
