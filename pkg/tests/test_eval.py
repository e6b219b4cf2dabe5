import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from reference_eval import random_instance, reference_evaluate

from rgbdfuse.data.coco import CocoDataset
from rgbdfuse.data.masks import mask_to_rle, tight_bbox
from rgbdfuse.errors import ContractError
from rgbdfuse.evaluation import (METRICS, Detection, detection_to_json, detections_from_json, evaluate,
                                 gt_as_detections, mask_iou)


def square(h=20, w=20, y=0, x=0, size=10):
    m = np.zeros((h, w), dtype=bool)
    m[y : y + size, x : x + size] = True
    return m


def single_gt(mask):
    ann = {"id": 1, "image_id": 1, "category_id": 1, "segmentation": mask_to_rle(mask), "area": int(mask.sum()),
           "bbox": tight_bbox(mask), "iscrowd": 0}
    return CocoDataset([{"id": 1, "height": mask.shape[0], "width": mask.shape[1]}], [{"id": 1, "name": "a"}], [ann])


def det(mask, score=0.9, cat=1, image_id=1):
    return Detection(image_id, cat, score, [float(v) for v in tight_bbox(mask)], mask)


def close(a, b, tol=1e-9):
    return (a is None and b is None) or (a is not None and b is not None and abs(a - b) <= tol)


def test_mask_iou_examples():
    a = square()
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, square(y=10, x=10)) == 0.0
    assert abs(mask_iou(a, square(x=5)) - 50 / 150) < 1e-15


def test_mask_iou_both_empty():
    with pytest.raises(ContractError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 3)))


def test_perfect_detection():
    m = square()
    r = evaluate(single_gt(m), [det(m)])
    assert r.segm["ap"] == r.segm["ap50"] == r.segm["ap75"] == 1.0
    assert r.segm["ap_s"] == 1.0 and r.segm["ap_m"] is None and r.segm["ap_l"] is None


def test_third_overlap_misses_at_half():
    r = evaluate(single_gt(square()), [det(square(x=5))])
    assert r.segm["ap50"] == 0.0


def test_unknown_image_rejected():
    m = square()
    with pytest.raises(ContractError):
        evaluate(single_gt(m), [det(m, image_id=7)])


def test_matches_reference_examples():
    rng = np.random.default_rng(99)
    for _ in range(25):
        gt, dets = random_instance(rng)
        report = evaluate(gt, dets)
        for t in ("segm", "bbox"):
            ref = reference_evaluate(gt, dets, t)
            got = getattr(report, t)
            assert all(close(got[k], ref[k]) for k in METRICS), (t, got, ref)


seeds = st.integers(0, 2**32 - 1)


@given(seeds)
def test_monotone_score_transform_invariance(seed):
    gt, dets = random_instance(np.random.default_rng(seed))
    moved = [Detection(d.image_id, d.category_id, d.score**3 * 0.5 + 0.1, d.box, d.mask) for d in dets]
    assert evaluate(gt, dets).to_dict() == evaluate(gt, moved).to_dict()


@given(seeds)
def test_low_score_miss_never_helps(seed):
    gt, dets = random_instance(np.random.default_rng(seed))
    img = gt.images[0]
    blank = np.zeros((img["height"], img["width"]), dtype=bool)
    covered = np.zeros_like(blank)
    for a in gt.annotations:
        if a["image_id"] == img["id"]:
            covered |= gt.decode(a)
    free = np.argwhere(~covered)
    if free.size == 0:
        return
    blank[tuple(free[0])] = True
    low = min([d.score for d in dets], default=1.0) - 0.01
    extra = Detection(img["id"], gt.annotations[0]["category_id"], low,
                      [float(free[0][1]) + 0.0, float(free[0][0]), 1.0, 1.0], blank)
    before, after = evaluate(gt, dets), evaluate(gt, dets + [extra])
    for t in ("segm", "bbox"):
        for k in METRICS:
            b, a = getattr(before, t)[k], getattr(after, t)[k]
            assert (a is None) == (b is None)
            if a is not None:
                assert a <= b + 1e-12


@given(seeds)
def test_ground_truth_as_detections_is_perfect(seed):
    gt, _ = random_instance(np.random.default_rng(seed))
    r = evaluate(gt, gt_as_detections(gt))
    for t in ("segm", "bbox"):
        assert all(v == 1.0 for v in getattr(r, t).values() if v is not None)


@given(seeds)
def test_absent_category_detections_are_irrelevant(seed):
    gt, dets = random_instance(np.random.default_rng(seed))
    present = {a["category_id"] for a in gt.annotations}
    kept = [d for d in dets if d.category_id in present]
    assert evaluate(gt, dets).to_dict() == evaluate(gt, kept).to_dict()


def test_detection_json_round_trip():
    m = square()
    d = det(m, 0.75)
    back = detections_from_json([detection_to_json(d, 20, 20)])[0]
    assert back.score == 0.75 and back.box == d.box
    assert np.array_equal(back.decoded_mask(20, 20), m)


def test_report_table_formats_undefined():
    m = square()
    table = evaluate(single_gt(m), [det(m)]).table("x")
    assert "100.0" in table and "-" in table.splitlines()[1]
