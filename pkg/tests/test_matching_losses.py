import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbdfuse import tensor as T
from rgbdfuse.errors import ContractError
from rgbdfuse.losses import (LossWeights, Prediction, Targets, boxes_from_xywh, boxes_to_xywh, giou,
                             giou_matrix, match, set_loss)
from rgbdfuse.matching import MatchResult, hungarian_match
from rgbdfuse.tensor import Tensor


def brute_force(cost):
    """Lowest total cost; among ties the lexicographically smallest query tuple."""
    n, m = cost.shape
    best = None
    for perm in itertools.permutations(range(m), n):
        total = sum(cost[i, perm[i]] for i in range(n))
        if best is None or total < best[0] - 1e-12:
            best = (total, perm)
    return best


def test_diagonal_dominance():
    r = hungarian_match(np.array([[1.0, 9.0], [9.0, 1.0]]))
    assert r.assignment == {0: 0, 1: 1} and r.total_cost == 2.0


def test_single_gt_picks_argmin_column():
    r = hungarian_match(np.array([[5.0, 2.0, 7.0]]))
    assert r.assignment == {0: 1}


def test_ties_resolve_to_lowest_query():
    r = hungarian_match(np.zeros((2, 4)))
    assert r.assignment == {0: 0, 1: 1}


def test_too_many_gt():
    with pytest.raises(ContractError):
        hungarian_match(np.zeros((3, 2)))


def test_non_finite_cost():
    with pytest.raises(ContractError):
        hungarian_match(np.array([[np.inf, 1.0]]))


def test_empty_gt():
    assert hungarian_match(np.zeros((0, 4))).assignment == {}


def test_random_4x6_matches_enumeration(rng):
    cost = rng.uniform(0, 10, (4, 6))
    total, perm = brute_force(cost)
    r = hungarian_match(cost)
    assert abs(r.total_cost - total) < 1e-9
    assert tuple(r.assignment[i] for i in range(4)) == perm


@given(st.integers(0, 5), st.integers(0, 2), st.integers(0, 2**32 - 1), st.booleans())
def test_hungarian_equals_enumeration(n, extra, seed, integer_costs):
    m = min(n + extra, 7)
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, (n, m)).astype(float) if integer_costs else rng.normal(size=(n, m))
    total, perm = brute_force(cost)
    r = hungarian_match(cost)
    assert abs(r.total_cost - total) <= 1e-9
    assert tuple(r.assignment[i] for i in range(n)) == perm
    assert len(set(r.assignment.values())) == n
    assert abs(r.total_cost - sum(cost[g, q] for g, q in r.assignment.items())) <= 1e-12


# --- GIoU -----------------------------------------------------------------

def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=float)
    return np.array([(b[0] + b[2]) / 2, (b[1] + b[3]) / 2, b[2] - b[0], b[3] - b[1]])


def test_giou_identical_boxes():
    b = Tensor(np.array([[0.5, 0.5, 0.2, 0.4]]))
    assert giou(b, b).data.tolist() == [1.0]


def test_giou_disjoint_unit_boxes_hand_computation():
    a = xyxy_to_cxcywh([0, 0, 1, 1])[None]
    b = xyxy_to_cxcywh([2, 0, 3, 1])[None]
    g = giou(Tensor(a), Tensor(b)).data[0]
    assert abs(g - (-1.0 / 3.0)) < 1e-15
    assert abs((1 - g) - 4.0 / 3.0) < 1e-15


def test_giou_nested_equals_iou():
    outer = xyxy_to_cxcywh([0, 0, 4, 4])[None]
    inner = xyxy_to_cxcywh([1, 1, 3, 2])[None]
    assert abs(giou(Tensor(outer), Tensor(inner)).data[0] - 2.0 / 16.0) < 1e-15


boxes = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.5), st.floats(0.01, 0.5))


@given(boxes, boxes)
def test_giou_range_and_symmetry(a, b):
    a, b = np.array([a]), np.array([b])
    g = giou(Tensor(a), Tensor(b)).data[0]
    assert -1.0 < g <= 1.0
    assert abs(g - giou(Tensor(b), Tensor(a)).data[0]) < 1e-12
    assert abs(g - giou_matrix(a, b)[0, 0]) < 1e-12
    if not np.allclose(a, b):
        assert g < 1.0


def test_box_conversions_round_trip():
    xywh = np.array([[3.0, 4.0, 10.0, 6.0]])
    norm = boxes_from_xywh(xywh, 32, 64)
    np.testing.assert_allclose(boxes_to_xywh(norm, 32, 64), xywh, atol=1e-12)


# --- set loss -------------------------------------------------------------

def perfect_prediction(tgt: Targets, n_q: int, k: int):
    logits = np.full((n_q, k + 1), -30.0)
    logits[:, k] = 30.0
    boxes = np.full((n_q, 4), 0.5)
    masks = np.full((n_q,) + tgt.masks.shape[1:], -40.0)
    for i in range(len(tgt)):
        logits[i] = -30.0
        logits[i, tgt.labels[i]] = 30.0
        boxes[i] = tgt.boxes[i]
        masks[i] = np.where(tgt.masks[i] > 0.5, 40.0, -40.0)
    return Prediction(Tensor(logits), Tensor(boxes), Tensor(masks))


def binary_targets(rng, n=2, g=6):
    masks = np.zeros((n, g, g))
    boxes = []
    for i in range(n):
        r, c = rng.integers(0, g - 2, 2)
        masks[i, r : r + 2, c : c + 2] = 1.0
        boxes.append([(c + 1) / g, (r + 1) / g, 2 / g, 2 / g])
    return Targets(rng.integers(0, 2, n), np.array(boxes), masks)


def test_perfect_prediction_has_near_zero_loss(rng):
    tgt = binary_targets(rng)
    pred = perfect_prediction(tgt, 5, 2)
    res = set_loss(pred, tgt)
    c = res.components
    assert c["l1"] == 0.0 and abs(c["giou"]) < 1e-15
    assert c["cls"] < 1e-12 and c["bce"] < 1e-12 and c["dice"] < 0.1
    assert res.match.assignment == {0: 0, 1: 1}


def test_loss_is_weighted_sum(rng):
    tgt = binary_targets(rng, 3)
    pred = Prediction(Tensor(rng.normal(size=(6, 3))), T.sigmoid(Tensor(rng.normal(size=(6, 4)))),
                      Tensor(rng.normal(size=(6, 6, 6))))
    w = LossWeights(cls=2.0, l1=3.0, giou=0.5, mask=1.5)
    res = set_loss(pred, tgt, weights=w)
    c = res.components
    expected = 2.0 * c["cls"] + 3.0 * c["l1"] + 0.5 * c["giou"] + 1.5 * (c["dice"] + c["bce"])
    assert abs(res.total.item() - expected) < 1e-12


def test_unmatched_queries_target_no_object(rng):
    tgt = Targets(np.zeros(0, int), np.zeros((0, 4)), np.zeros((0, 4, 4)))
    logits = np.zeros((4, 3))
    logits[:, 2] = 50.0
    res = set_loss(Prediction(Tensor(logits), Tensor(np.full((4, 4), 0.5)), Tensor(np.zeros((4, 4, 4)))), tgt)
    assert res.components["cls"] < 1e-12 and res.total.item() < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_set_loss_invariant_to_gt_order(seed):
    rng = np.random.default_rng(seed)
    tgt = Targets(rng.integers(0, 2, 3), np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))]),
                  rng.uniform(0, 1, (3, 4, 4)))
    pred = Prediction(Tensor(rng.normal(size=(6, 3))), T.sigmoid(Tensor(rng.normal(size=(6, 4)))),
                      Tensor(rng.normal(size=(6, 4, 4))))
    a = set_loss(pred, tgt).total.item()
    b = set_loss(pred, tgt.permuted(rng.permutation(3))).total.item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_set_loss_rejects_partial_match(rng):
    tgt = binary_targets(rng)
    pred = perfect_prediction(tgt, 4, 2)
    with pytest.raises(ContractError):
        set_loss(pred, tgt, MatchResult({0: 0}, 0.0))


def test_set_loss_gradient(rng):
    tgt = binary_targets(rng, 2, 4)
    inputs = [rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (5, 4, 4))]
    probe = Prediction(Tensor(inputs[0]), T.sigmoid(Tensor(inputs[1])), Tensor(inputs[2]))
    m = match(probe, tgt)

    def fn(lg, bx, mk):
        return set_loss(Prediction(lg, T.sigmoid(bx), mk), tgt, m).total

    assert T.gradient_check(fn, inputs, h=1e-5) <= 1e-5
