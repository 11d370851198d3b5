"""Salient-object ground truth from fixations and instance annotations.

Each object's score is the sum of its total and its average fixation
density, averaged over the images that contain it; objects scoring at
least a fixed fraction of the image's best score are kept and merged into
a binary mask.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .imageio import resize_array

log = logging.getLogger(__name__)

SELECT_RATIO = 0.8

# Cityscapes label ids whose category is "void"; never scored as objects.
CITYSCAPES_VOID_IDS = frozenset(range(0, 7))
CITYSCAPES_LABELS = {
    0: "unlabeled", 1: "ego vehicle", 2: "rectification border", 3: "out of roi", 4: "static",
    5: "dynamic", 6: "ground", 7: "road", 8: "sidewalk", 9: "parking", 10: "rail track",
    11: "building", 12: "wall", 13: "fence", 14: "guard rail", 15: "bridge", 16: "tunnel",
    17: "pole", 18: "polegroup", 19: "traffic light", 20: "traffic sign", 21: "vegetation",
    22: "terrain", 23: "sky", 24: "person", 25: "rider", 26: "car", 27: "truck", 28: "bus",
    29: "caravan", 30: "trailer", 31: "train", 32: "motorcycle", 33: "bicycle",
}


@dataclass
class Fixation:
    x: float
    y: float
    duration: float


@dataclass
class FixationSet:
    image_id: str
    points: List[Fixation] = field(default_factory=list)


@dataclass
class FixationDensityMap:
    image_id: str
    values: np.ndarray
    rejected: int = 0


@dataclass
class ObjectInstance:
    instance_id: int
    category: str
    rows: np.ndarray
    cols: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(len(self.rows))

    @classmethod
    def from_mask(cls, instance_id, mask, category="object") -> "ObjectInstance":
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            raise ValueError(f"instance {instance_id} has no pixels")
        return cls(instance_id, category, rows, cols)


@dataclass
class ScoreRow:
    instance_id: int
    category: str
    score: float
    selected: bool


@dataclass
class SaliencyScoreTable:
    image_id: str
    rows: List[ScoreRow]

    def scores(self) -> Dict[int, float]:
        return {r.instance_id: r.score for r in self.rows}

    def selected_ids(self) -> List[int]:
        return [r.instance_id for r in self.rows if r.selected]


def read_fixation_csv(path) -> Dict[str, FixationSet]:
    """Columns: image_id, x, y, duration_ms."""
    sets: Dict[str, FixationSet] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            image_id = rec["image_id"]
            fs = sets.setdefault(image_id, FixationSet(image_id))
            fs.points.append(Fixation(float(rec["x"]), float(rec["y"]), float(rec["duration_ms"])))
    return sets


def fixation_density(fix: FixationSet, shape: Tuple[int, int], sigma: float = None) -> FixationDensityMap:
    """Duration-weighted fixation impulses smoothed by an isotropic Gaussian.

    ``sigma`` defaults to width / 20. The map is renormalized to unit mass
    after smoothing, which absorbs mass lost past the image border.
    Fixations outside the image or with nonpositive duration are dropped
    and counted in ``rejected``.
    """
    h, w = shape
    sigma = w / 20.0 if sigma is None else sigma
    impulses = np.zeros((h, w), dtype=np.float64)
    rejected = 0
    for p in fix.points:
        if not (0 <= p.x < w and 0 <= p.y < h) or not p.duration > 0:
            rejected += 1
            continue
        impulses[int(p.y), int(p.x)] += p.duration
    if rejected:
        log.warning("%s: dropped %d invalid fixations", fix.image_id, rejected)
    if impulses.sum() == 0:
        return FixationDensityMap(fix.image_id, impulses, rejected)
    smooth = ndimage.gaussian_filter(impulses, sigma, mode="constant", cval=0.0)
    return FixationDensityMap(fix.image_id, smooth / smooth.sum(), rejected)


def instances_from_ids(ids: np.ndarray) -> List[ObjectInstance]:
    """Segments of a Cityscapes instance-id map.

    Ids >= 1000 encode ``class_id * 1000 + index``; smaller ids are
    class-level segments (e.g. road), which also count as objects.
    Void classes are skipped.
    """
    objects = []
    for value in np.unique(ids):
        value = int(value)
        class_id = value // 1000 if value >= 1000 else value
        if class_id in CITYSCAPES_VOID_IDS:
            continue
        rows, cols = np.nonzero(ids == value)
        objects.append(ObjectInstance(value, CITYSCAPES_LABELS.get(class_id, str(class_id)), rows, cols))
    return objects


def object_saliency(obj: ObjectInstance, densities: Sequence) -> float:
    """Mean over containing images of (1 + 1/|O|) * sum of density over O."""
    if len(densities) == 0:
        raise ValueError(f"object {obj.instance_id} appears in no image")
    n = obj.pixel_count
    per_image = []
    for d in densities:
        values = d.values if isinstance(d, FixationDensityMap) else np.asarray(d)
        per_image.append((1.0 + 1.0 / n) * values[obj.rows, obj.cols].sum())
    return float(np.mean(per_image))


def select_salient(scores, ratio: float = SELECT_RATIO) -> List[int]:
    """Ids whose score is at least ``ratio`` times the best score.

    ``scores`` is a SaliencyScoreTable or an ``{id: score}`` mapping. When
    no object has positive saliency nothing is selected.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if isinstance(scores, SaliencyScoreTable):
        scores = scores.scores()
    if not scores:
        raise ValueError("empty score table")
    best = max(scores.values())
    if best <= 0:
        return []
    return [k for k, s in scores.items() if s >= ratio * best]


def score_objects(image_id: str, objects: Sequence[ObjectInstance], density, ratio=SELECT_RATIO) -> SaliencyScoreTable:
    scores = {o.instance_id: object_saliency(o, [density]) for o in objects}
    chosen = set(select_salient(scores, ratio)) if scores else set()
    return SaliencyScoreTable(
        image_id,
        [ScoreRow(o.instance_id, o.category, scores[o.instance_id], o.instance_id in chosen) for o in objects],
    )


def rasterize_ground_truth(selected: Iterable[ObjectInstance], shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    for o in selected:
        mask[o.rows, o.cols] = 1
    return mask


def build_ground_truth(image_id, ids: np.ndarray, fixations: FixationSet, sigma=None, ratio=SELECT_RATIO):
    """One image: density map, score table and binary salient-object mask."""
    density = fixation_density(fixations, ids.shape, sigma)
    objects = instances_from_ids(ids)
    table = score_objects(image_id, objects, density, ratio)
    chosen = set(table.selected_ids())
    mask = rasterize_ground_truth([o for o in objects if o.instance_id in chosen], ids.shape)
    return density, table, mask


def aam(masks: Sequence[np.ndarray], out_shape) -> np.ndarray:
    """Average annotation map: masks resized bilinearly, then averaged."""
    if len(masks) == 0:
        raise ValueError("AAM of an empty dataset")
    acc = np.zeros(out_shape, dtype=np.float64)
    for m in masks:
        acc += resize_array(np.asarray(m, dtype=np.float64), out_shape)
    return np.clip(acc / len(masks), 0.0, 1.0)


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def count_objects(mask) -> int:
    return int(ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)[1])


@dataclass
class DatasetStats:
    counts: np.ndarray
    areas: np.ndarray
    count_edges: np.ndarray
    count_hist: np.ndarray
    area_edges: np.ndarray
    area_hist: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["histogram", "bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.count_edges[:-1], self.count_edges[1:], self.count_hist):
                w.writerow(["objects", f"{lo:g}", f"{hi:g}", int(c)])
            for lo, hi, c in zip(self.area_edges[:-1], self.area_edges[1:], self.area_hist):
                w.writerow(["area_fraction", f"{lo:g}", f"{hi:g}", int(c)])


def dataset_stats(masks: Sequence[np.ndarray], area_bins: int = 10) -> DatasetStats:
    """Per-image salient-object counts (8-connected) and foreground area fractions.

    Count bins are unit-wide, centred on the integers 0..max count; area bins
    split [0, 1] uniformly.
    """
    if len(masks) == 0:
        raise ValueError("statistics of an empty dataset")
    counts = np.array([count_objects(m) for m in masks])
    areas = np.array([float((np.asarray(m) > 0).mean()) for m in masks])
    count_edges = np.arange(counts.max() + 2) - 0.5
    count_hist, _ = np.histogram(counts, bins=count_edges)
    area_hist, area_edges = np.histogram(areas, bins=area_bins, range=(0.0, 1.0))
    return DatasetStats(counts, areas, count_edges, count_hist, area_edges, area_hist)


def plot_stats(stats: DatasetStats, out_dir) -> List[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for name, edges, hist, xlabel in (
        ("object_count_hist.png", stats.count_edges, stats.count_hist, "salient objects per image"),
        ("area_hist.png", stats.area_edges, stats.area_hist, "salient area fraction"),
    ):
        fig, ax = plt.subplots(figsize=(4, 2.5))
        ax.bar(edges[:-1], hist, width=np.diff(edges), align="edge", edgecolor="k")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("images")
        fig.tight_layout()
        path = os.path.join(out_dir, name)
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_score_csv(path, tables: Sequence[SaliencyScoreTable]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "instance_id", "category", "score", "selected"])
        for t in tables:
            for r in t.rows:
                w.writerow([t.image_id, r.instance_id, r.category, repr(r.score), int(r.selected)])
