"""Dataset statistics over COCO-style annotation files."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data.coco import CocoDataset
from .errors import ContractError, ValidationError

CSV_FILES = (
    "summary.csv",
    "scale_cdf.csv",
    "bbox_scatter.csv",
    "instances_per_category.csv",
    "categories_per_image_hist.csv",
)


@dataclass
class DatasetSummary:
    image_count: int
    class_count: int
    annotation_count: int
    mean_objects_per_image: float
    mean_categories_per_image: float
    per_category_instance_counts: dict[int, int]
    categories_per_image_histogram: dict[int, int]


@dataclass(frozen=True)
class ScalePoint:
    relative_scale: float
    cumulative_fraction: float


def summarize(ds: CocoDataset) -> DatasetSummary:
    if not ds.images:
        raise ContractError("cannot summarise an empty dataset")
    per_image: dict = {img["id"]: [] for img in ds.images}
    for ann in ds.annotations:
        per_image[ann["image_id"]].append(ann["category_id"])
    n_img = len(per_image)
    n_ann = sum(len(v) for v in per_image.values())
    distinct = [len(set(v)) for v in per_image.values()]
    per_cat = Counter(ann["category_id"] for ann in ds.annotations)
    hist = Counter(distinct)
    used = {c["id"] for c in ds.categories} if ds.categories else set(per_cat)
    return DatasetSummary(
        image_count=n_img,
        class_count=len(used),
        annotation_count=n_ann,
        mean_objects_per_image=n_ann / n_img,
        mean_categories_per_image=sum(distinct) / n_img,
        per_category_instance_counts={int(c): per_cat.get(c, 0) for c in sorted(used | set(per_cat))},
        categories_per_image_histogram={int(k): hist[k] for k in sorted(hist)},
    )


def relative_scales(ds: CocoDataset) -> np.ndarray:
    """``sqrt(area / image area)`` per annotation, in annotation order."""
    images = ds.image_by_id()
    out = []
    for ann in ds.annotations:
        area = ann.get("area", 0)
        if not area > 0:
            raise ValidationError(f"annotation {ann.get('id')} has nonpositive area", [f"annotation {ann.get('id')}: area {area}"])
        img = images[ann["image_id"]]
        out.append(math.sqrt(area / (img["width"] * img["height"])))
    return np.array(out, dtype=np.float64)


def relative_scale_cdf(ds: CocoDataset) -> list[ScalePoint]:
    """Empirical CDF: one point per annotation, sorted by scale."""
    s = np.sort(relative_scales(ds), kind="stable")
    n = len(s)
    return [ScalePoint(float(v), (i + 1) / n) for i, v in enumerate(s)]


def resample_cdf(points: list[ScalePoint], bins: int = 100) -> list[ScalePoint]:
    """CDF evaluated at ``bins`` evenly spaced scales in (0, 1]."""
    xs = np.array([p.relative_scale for p in points])
    grid = np.arange(1, bins + 1) / bins
    frac = np.searchsorted(xs, grid, side="right") / max(len(xs), 1)
    return [ScalePoint(float(g), float(f)) for g, f in zip(grid, frac)]


def bbox_scatter(ds: CocoDataset) -> list[tuple[float, float]]:
    images = ds.image_by_id()
    out = []
    for ann in ds.annotations:
        img = images[ann["image_id"]]
        x, y, w, h = (float(v) for v in ann["bbox"])
        if x < 0 or y < 0 or x + w > img["width"] or y + h > img["height"] or w <= 0 or h <= 0:
            raise ValidationError(f"annotation {ann['id']} bbox leaves its image",
                                  [f"annotation {ann['id']}: bbox {ann['bbox']} outside {img['width']}x{img['height']}"])
        out.append((w / img["width"], h / img["height"]))
    return out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: float) -> str:
    return repr(float(v))


def stats_tables(ds: CocoDataset, name: str = "dataset") -> dict[str, str]:
    """CSV text for each output file, keyed by file name."""
    s = summarize(ds)
    cdf = relative_scale_cdf(ds)
    names = {c["id"]: c.get("name", str(c["id"])) for c in ds.categories}
    return {
        "summary.csv": _csv(
            ["dataset", "images", "classes", "annotations", "mean_objects_per_image", "mean_categories_per_image"],
            [[name, s.image_count, s.class_count, s.annotation_count,
              _num(s.mean_objects_per_image), _num(s.mean_categories_per_image)]],
        ),
        "scale_cdf.csv": _csv(["relative_scale", "cumulative_fraction"],
                              [[_num(p.relative_scale), _num(p.cumulative_fraction)] for p in cdf]),
        "bbox_scatter.csv": _csv(["annotation_id", "relative_width", "relative_height"],
                                 [[a["id"], _num(w), _num(h)] for a, (w, h) in zip(ds.annotations, bbox_scatter(ds))]),
        "instances_per_category.csv": _csv(
            ["category_id", "name", "instances"],
            [[c, names.get(c, str(c)), n] for c, n in s.per_category_instance_counts.items()],
        ),
        "categories_per_image_hist.csv": _csv(["categories_in_image", "images"],
                                              [[k, v] for k, v in s.categories_per_image_histogram.items()]),
    }


def write_stats(ds: CocoDataset, out_dir, name: str = "dataset") -> DatasetSummary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, text in stats_tables(ds, name).items():
        (out / fname).write_text(text)
    return summarize(ds)


__all__ = [
    "CSV_FILES",
    "DatasetSummary",
    "ScalePoint",
    "bbox_scatter",
    "relative_scale_cdf",
    "relative_scales",
    "resample_cdf",
    "stats_tables",
    "summarize",
    "write_stats",
]
