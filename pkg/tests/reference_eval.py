"""Slow, exact average-precision reference used to cross-check the evaluator.

Written independently of the package: plain Python loops, rational IoU and
rational recall comparisons, no vectorised shortcuts.
"""

from __future__ import annotations

from fractions import Fraction

THRESHOLDS = [Fraction(50 + 5 * k, 100) for k in range(10)]
BUCKETS = {
    "all": lambda a: True,
    "s": lambda a: a < 1024,
    "m": lambda a: 1024 <= a <= 9216,
    "l": lambda a: a > 9216,
}


def pixel_mask(mask):
    return mask.astype(bool)


def mask_overlap(a, b) -> Fraction:
    return Fraction(int((a & b).sum()), int((a | b).sum()))


def rect_iou(a, b) -> Fraction:
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    iw = max(Fraction(0), min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(Fraction(0), min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else Fraction(0)


def interpolated_ap(flags: list[bool], n_pos: int) -> Fraction:
    tp = fp = 0
    curve = []
    for hit in flags:
        tp += hit
        fp += not hit
        curve.append((tp, Fraction(tp, tp + fp)))
    total = Fraction(0)
    for k in range(101):
        best = Fraction(0)
        for tp_i, prec in curve:
            if 100 * tp_i >= k * n_pos:
                best = max(best, prec)
        total += best
    return total / 101


def reference_evaluate(gt, dets, iou_type: str) -> dict:
    images = {img["id"]: img for img in gt.images}
    gts = []  # (image, category, region, area)
    for ann in gt.annotations:
        img = images[ann["image_id"]]
        region = pixel_mask(gt.decode(ann)) if iou_type == "segm" else ann["bbox"]
        gts.append((ann["image_id"], ann["category_id"], region, ann["area"]))
    dts = []  # (global index, image, category, score, region, area)
    for k, d in enumerate(dets):
        img = images[d.image_id]
        if iou_type == "segm":
            region = pixel_mask(d.decoded_mask(img["height"], img["width"]))
            area = int(region.sum())
        else:
            region = d.box
            area = Fraction(d.box[2]) * Fraction(d.box[3])
        dts.append((k, d.image_id, d.category_id, d.score, region, area))
    overlap = mask_overlap if iou_type == "segm" else rect_iou
    cache = {}

    def iou(d, g):
        key = (id(d), id(g))
        if key not in cache:
            cache[key] = overlap(d, g)
        return cache[key]
    categories = sorted({g[1] for g in gts})

    results = {}
    for bucket, inside in BUCKETS.items():
        per_threshold = []
        for thr in THRESHOLDS:
            per_category = []
            for cat in categories:
                cat_gts = [g for g in gts if g[1] == cat]
                n_pos = sum(1 for g in cat_gts if inside(g[3]))
                if n_pos == 0:
                    continue
                ranked = sorted((d for d in dts if d[2] == cat), key=lambda d: (-d[3], d[0]))
                used = set()
                flags = []
                for d in ranked:
                    cands = [(j, g) for j, g in enumerate(cat_gts) if g[0] == d[1] and j not in used
                             and iou(d[4], g[2]) >= thr]
                    preferred = [c for c in cands if inside(c[1][3])] or cands
                    if preferred:
                        j, g = max(preferred, key=lambda c: (iou(d[4], c[1][2]), -c[0]))
                        used.add(j)
                        if inside(g[3]):
                            flags.append(True)
                    elif inside(d[5]):
                        flags.append(False)
                per_category.append(interpolated_ap(flags, n_pos))
            per_threshold.append(sum(per_category) / len(per_category) if per_category else None)
        results[bucket] = per_threshold

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(sum(vals) / len(vals)) if vals else None

    def as_float(v):
        return None if v is None else float(v)

    return {
        "ap": mean(results["all"]),
        "ap50": as_float(results["all"][0]),
        "ap75": as_float(results["all"][5]),
        "ap_s": mean(results["s"]),
        "ap_m": mean(results["m"]),
        "ap_l": mean(results["l"]),
    }


def random_instance(rng, max_images=4, max_gt=5, max_dets=8):
    """Tiny random evaluation problem: ``(CocoDataset, detections)`` with rectangle masks."""
    import numpy as np

    from rgbdfuse.data.coco import CocoDataset
    from rgbdfuse.data.masks import mask_to_rle, tight_bbox
    from rgbdfuse.evaluation import Detection

    def rect(h, w):
        rh, rw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        m = np.zeros((h, w), dtype=bool)
        m[y : y + rh, x : x + rw] = True
        return m

    n_img = int(rng.integers(1, max_images + 1))
    sizes = [(24, 24), (48, 48), (100, 100)]
    images = []
    for i in range(n_img):
        h, w = sizes[int(rng.integers(0, len(sizes)))]
        images.append({"id": i + 1, "height": h, "width": w, "file_name": f"{i + 1}.ppm"})
    cats = [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}, {"id": 3, "name": "c"}]
    anns = []
    for k in range(int(rng.integers(1, max_gt + 1))):
        img = images[int(rng.integers(0, n_img))]
        m = rect(img["height"], img["width"])
        anns.append({"id": k + 1, "image_id": img["id"], "category_id": int(rng.integers(1, 3)),
                     "segmentation": mask_to_rle(m), "area": int(m.sum()), "bbox": tight_bbox(m), "iscrowd": 0})
    gt = CocoDataset(images, cats, anns)
    dets = []
    for _ in range(int(rng.integers(0, max_dets + 1))):
        if anns and rng.random() < 0.6:
            src = anns[int(rng.integers(0, len(anns)))]
            img = images[src["image_id"] - 1]
            m = gt.decode(src).copy()
            if rng.random() < 0.6:
                m = np.roll(m, int(rng.integers(-3, 4)), axis=int(rng.integers(0, 2)))
            cat = src["category_id"] if rng.random() < 0.8 else int(rng.integers(1, 4))
        else:
            img = images[int(rng.integers(0, n_img))]
            m = rect(img["height"], img["width"])
            cat = int(rng.integers(1, 4))
        if not m.any():
            continue
        score = float(rng.choice([0.2, 0.5, 0.5, 0.9, float(rng.random())]))
        dets.append(Detection(img["id"], cat, score, [float(v) for v in tight_bbox(m)], m))
    return gt, dets
