"""COCO-style average precision for instance masks and boxes.

Conventions: IoU thresholds 0.50:0.05:0.95, 101 recall points with a
right-to-left precision envelope, size buckets by ground-truth mask area
(small < 32^2 <= medium <= 96^2 < large). Inside a size bucket, ground truth
outside the bucket is ignored, a detection matched to an ignored ground truth
is ignored, and unmatched detections outside the bucket are ignored. All
ground truth is treated as non-crowd.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data.coco import CocoDataset
from .data.masks import decode_segmentation, mask_to_rle
from .errors import ContractError, DimensionError

IOU_THRESHOLDS = tuple((50 + 5 * k) / 100 for k in range(10))
RECALL_POINTS = np.arange(101) / 100
AREA_BUCKETS = {
    "all": (0.0, float("inf")),
    "s": (0.0, 32.0**2),
    "m": (32.0**2, 96.0**2),
    "l": (96.0**2, float("inf")),
}
METRICS = ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")


def in_bucket(area: float, bucket: str) -> bool:
    if bucket == "all":
        return True
    if bucket == "s":
        return area < 32.0**2
    if bucket == "m":
        return 32.0**2 <= area <= 96.0**2
    return area > 96.0**2


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    box: list[float]
    mask: object = None  # bool array, RLE dict or polygon list

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ContractError(f"detection score must be finite, got {self.score}")

    def decoded_mask(self, height: int, width: int) -> np.ndarray:
        if self.mask is None:
            raise ContractError("segmentation evaluation needs detection masks")
        if isinstance(self.mask, np.ndarray):
            m = self.mask.astype(bool)
            if m.shape != (height, width):
                raise DimensionError(f"detection mask {m.shape} != image {(height, width)}")
            return m
        return decode_segmentation(self.mask, height, width)


@dataclass
class ApReport:
    segm: dict = field(default_factory=dict)
    bbox: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"segm": dict(self.segm), "bbox": dict(self.bbox)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def table(self, label: str = "model") -> str:
        """Aligned text table in the usual column order."""
        cols = [("AP^seg", self.segm["ap"]), ("AP^det", self.bbox["ap"]),
                ("AP50^seg", self.segm["ap50"]), ("AP75^seg", self.segm["ap75"]),
                ("APs^seg", self.segm["ap_s"]), ("APm^seg", self.segm["ap_m"]),
                ("APl^seg", self.segm["ap_l"])]
        fmt = lambda v: "-" if v is None else f"{100 * v:.1f}"  # noqa: E731
        width = max(len(label), len("Method"))
        head = "Method".ljust(width) + "".join(f"{name:>10}" for name, _ in cols)
        row = label.ljust(width) + "".join(f"{fmt(v):>10}" for _, v in cols)
        return head + "\n" + row + "\n"


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ContractError("mask_iou of two empty masks")
    return float(np.logical_and(a, b).sum() / union)


def box_iou_matrix(dt_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[x, y, w, h]`` boxes."""
    d = np.asarray(dt_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(d[:, None, 0] + d[:, None, 2], g[None, :, 0] + g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
    iy = np.minimum(d[:, None, 1] + d[:, None, 3], g[None, :, 1] + g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def mask_iou_matrix(dt_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    d = dt_masks.reshape(len(dt_masks), -1).astype(np.int64)
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.int64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return inter / union  # ground-truth masks are never empty


def _match_image(ious: np.ndarray, gt_ignore: np.ndarray, dt_area: np.ndarray, bucket: str, thr: float):
    """Greedy matching in detection order; returns per-detection (tp, ignored)."""
    n_dt, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_dt, dtype=bool)
    ignored = np.zeros(n_dt, dtype=bool)
    for d in range(n_dt):
        best = -1
        for pool in (~gt_ignore, gt_ignore):
            cand = np.nonzero(pool & ~taken & (ious[d] >= thr))[0]
            if cand.size:
                best = int(cand[np.argmax(ious[d, cand])])  # argmax keeps lowest index on ties
                break
        if best >= 0:
            taken[best] = True
            if gt_ignore[best]:
                ignored[d] = True
            else:
                tp[d] = True
        elif not in_bucket(dt_area[d], bucket):
            ignored[d] = True
    return tp, ignored


def average_precision(scores: np.ndarray, order_key: np.ndarray, tp: np.ndarray, n_pos: int) -> float:
    """101-point interpolated AP from per-detection TP flags."""
    if n_pos == 0:
        raise ContractError("average precision with no positives")
    if tp.size == 0:
        return 0.0
    order = np.lexsort((order_key, -scores))
    hits = tp[order].astype(np.float64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def _evaluate_type(gt: CocoDataset, dets: list[Detection], iou_type: str) -> dict:
    images = gt.image_by_id()
    gt_by = {}
    for ann in gt.annotations:
        gt_by.setdefault((ann["image_id"], ann["category_id"]), []).append(ann)
    dt_by = {}
    for k, d in enumerate(dets):
        dt_by.setdefault((d.image_id, d.category_id), []).append((k, d))

    cats = sorted({c for (_, c) in gt_by})
    # per (image, category): IoU matrix, gt areas, det areas, det scores, det global indices
    cells = {}
    keys = set(gt_by) | {k for k in dt_by if k[1] in set(cats)}
    for key in sorted(keys):
        anns = gt_by.get(key, [])
        img = images[key[0]]
        h, w = img["height"], img["width"]
        pairs = sorted(dt_by.get(key, []), key=lambda kd: (-kd[1].score, kd[0]))
        gt_area = np.array([float(a["area"]) for a in anns])
        if iou_type == "segm":
            gm = np.stack([decode_segmentation(a["segmentation"], h, w) for a in anns]) if anns \
                else np.zeros((0, h, w), dtype=bool)
            if pairs:
                dm = np.stack([d.decoded_mask(h, w) for _, d in pairs])
                ious = mask_iou_matrix(dm, gm) if anns else np.zeros((len(pairs), 0))
                dt_area = dm.reshape(len(pairs), -1).sum(1).astype(np.float64)
            else:
                ious, dt_area = np.zeros((0, len(anns))), np.zeros(0)
        else:
            gb = np.array([a["bbox"] for a in anns], dtype=np.float64).reshape(-1, 4)
            db = np.array([d.box for _, d in pairs], dtype=np.float64).reshape(-1, 4)
            ious = box_iou_matrix(db, gb)
            dt_area = db[:, 2] * db[:, 3]
        scores = np.array([d.score for _, d in pairs], dtype=np.float64)
        index = np.array([k for k, _ in pairs], dtype=np.int64)
        cells[key] = (ious, gt_area, dt_area, scores, index)

    out = {}
    for bucket in AREA_BUCKETS:
        per_thr = []
        for thr in IOU_THRESHOLDS:
            per_cat = []
            for c in cats:
                n_pos = 0
                all_scores, all_index, all_tp = [], [], []
                for (iid, cc), (ious, gt_area, dt_area, scores, index) in cells.items():
                    if cc != c:
                        continue
                    gt_ignore = np.array([not in_bucket(a, bucket) for a in gt_area], dtype=bool)
                    n_pos += int((~gt_ignore).sum())
                    tp, ignored = _match_image(ious, gt_ignore, dt_area, bucket, thr)
                    keep = ~ignored
                    all_scores.append(scores[keep])
                    all_index.append(index[keep])
                    all_tp.append(tp[keep])
                if n_pos == 0:
                    continue
                per_cat.append(average_precision(
                    np.concatenate(all_scores), np.concatenate(all_index), np.concatenate(all_tp), n_pos))
            per_thr.append(float(np.mean(per_cat)) if per_cat else None)
        out[bucket] = per_thr

    def mean_or_none(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "ap": mean_or_none(out["all"]),
        "ap50": out["all"][0],
        "ap75": out["all"][5],
        "ap_s": mean_or_none(out["s"]),
        "ap_m": mean_or_none(out["m"]),
        "ap_l": mean_or_none(out["l"]),
    }


def evaluate(gt: CocoDataset, dt: list[Detection], iou_types=("segm", "bbox")) -> ApReport:
    """Evaluate detections against a ground-truth dataset."""
    images = gt.image_by_id()
    for d in dt:
        if d.image_id not in images:
            raise ContractError(f"detection refers to unknown image {d.image_id}")
    report = ApReport()
    for t in iou_types:
        setattr(report, t, _evaluate_type(gt, dt, t))
    return report


def detections_from_json(doc) -> list[Detection]:
    """Read COCO-results style detections (list of dicts)."""
    out = []
    for d in doc:
        seg = d.get("segmentation")
        box = d.get("bbox")
        out.append(Detection(int(d["image_id"]), int(d["category_id"]), float(d["score"]),
                             list(box) if box is not None else None, seg))
    return out


def detection_to_json(d: Detection, height: int, width: int) -> dict:
    out = {"image_id": d.image_id, "category_id": d.category_id, "score": d.score, "bbox": list(d.box)}
    if d.mask is not None:
        m = d.decoded_mask(height, width)
        out["segmentation"] = mask_to_rle(m)
    return out


def gt_as_detections(gt: CocoDataset, score: float = 1.0) -> list[Detection]:
    images = gt.image_by_id()
    out = []
    for ann in gt.annotations:
        img = images[ann["image_id"]]
        m = decode_segmentation(ann["segmentation"], img["height"], img["width"])
        out.append(Detection(ann["image_id"], ann["category_id"], score, list(ann["bbox"]), m))
    return out


__all__ = [
    "ApReport",
    "Detection",
    "IOU_THRESHOLDS",
    "box_iou_matrix",
    "detection_to_json",
    "detections_from_json",
    "evaluate",
    "gt_as_detections",
    "mask_iou",
    "mask_iou_matrix",
]
