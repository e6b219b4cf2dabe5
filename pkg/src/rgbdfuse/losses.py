"""Set-prediction loss: matching cost, classification, box L1/GIoU, mask dice+BCE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .matching import MatchResult, hungarian_match
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    mask: float = 1.0
    eos_coef: float = 0.1  # relative weight of the "no object" class
    aux: float = 1.0  # weight of the auxiliary mask loss when a design has one


@dataclass
class Targets:
    """Ground truth for one image.

    ``labels`` are 0-based class indices, ``boxes`` normalised ``(cx, cy, w, h)``,
    ``masks`` soft targets on the prediction grid (``n x h' x w'`` in [0, 1]).
    """

    labels: np.ndarray
    boxes: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        n = len(self.labels)
        if len(self.boxes) != n or len(self.masks) != n:
            raise DimensionError(f"targets disagree on instance count: {n}, {len(self.boxes)}, {len(self.masks)}")

    def __len__(self) -> int:
        return len(self.labels)

    def permuted(self, order) -> "Targets":
        order = np.asarray(order, dtype=np.int64)
        return Targets(self.labels[order], self.boxes[order], self.masks[order])


@dataclass
class Prediction:
    """Per-query outputs for one image (or a batch with a leading axis).

    ``class_logits``: ``N x (K+1)`` with the last column "no object";
    ``boxes``: ``N x 4`` normalised ``(cx, cy, w, h)``; ``mask_logits``:
    ``N x h' x w'`` on the feature grid (upsampled for evaluation).
    """

    class_logits: Tensor
    boxes: Tensor
    mask_logits: Tensor
    aux_mask_logits: Tensor | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_queries(self) -> int:
        return self.class_logits.shape[-2]

    def image(self, b: int) -> "Prediction":
        pick = lambda t: None if t is None else T.take(t, (b,))  # noqa: E731
        return Prediction(pick(self.class_logits), pick(self.boxes), pick(self.mask_logits),
                          pick(self.aux_mask_logits), dict(self.meta))


@dataclass
class LossResult:
    total: Tensor
    components: dict[str, float]
    match: MatchResult


# ---------------------------------------------------------------------------
# boxes


def _corners_np(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU of ``(cx, cy, w, h)`` boxes (numpy, used for matching)."""
    ca, cb = _corners_np(a)[:, None, :], _corners_np(b)[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    hull = (np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])) * \
           (np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1]))
    return inter / union - (hull - union) / hull


def _col(t: Tensor, i: int) -> Tensor:
    return T.take(t, (Ellipsis, i))


def giou(a: Tensor, b) -> Tensor:
    """Row-wise GIoU of two ``n x 4`` ``(cx, cy, w, h)`` box sets, differentiable in both."""
    a = T._as_tensor(a)
    b = T._as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 4:
        raise DimensionError(f"giou needs matching (..., 4) boxes, got {a.shape} and {b.shape}")

    def corners(t):
        cx, cy, w, h = (_col(t, i) for i in range(4))
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5

    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (T.maximum(ax1, bx1) - T.minimum(ax0, bx0)) * (T.maximum(ay1, by1) - T.minimum(ay0, by0))
    return inter / union - (hull - union) / hull


def boxes_from_xywh(boxes, height: int, width: int) -> np.ndarray:
    """Pixel ``[x, y, w, h]`` -> normalised ``(cx, cy, w, h)``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2] / 2) / width, (b[:, 1] + b[:, 3] / 2) / height,
                     b[:, 2] / width, b[:, 3] / height], axis=1)


def boxes_to_xywh(boxes, height: int, width: int) -> np.ndarray:
    c = _corners_np(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    c = np.clip(c, 0.0, 1.0)
    return np.stack([c[:, 0] * width, c[:, 1] * height, (c[:, 2] - c[:, 0]) * width,
                     (c[:, 3] - c[:, 1]) * height], axis=1)


# ---------------------------------------------------------------------------
# matching cost


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mask_cost(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """``n_gt x N`` pairwise dice + mean BCE."""
    x = logits.reshape(len(logits), -1)
    t = targets.reshape(len(targets), -1)
    p = 1.0 / (1.0 + np.exp(-x))
    dice = 1.0 - (2.0 * t @ p.T + 1.0) / (t.sum(1)[:, None] + p.sum(1)[None, :] + 1.0)
    sp = np.logaddexp(0.0, x)  # softplus
    bce = (sp.sum(1)[None, :] - t @ x.T) / x.shape[1]
    return dice + bce


def matching_cost(pred: Prediction, tgt: Targets, weights: LossWeights = LossWeights()) -> np.ndarray:
    """``n_gt x N`` cost used by the Hungarian matcher."""
    prob = _softmax_np(pred.class_logits.data)
    c_cls = -prob[:, tgt.labels].T
    c_l1 = np.abs(tgt.boxes[:, None, :] - pred.boxes.data[None, :, :]).sum(-1)
    c_giou = -giou_matrix(tgt.boxes, pred.boxes.data)
    c_mask = _mask_cost(pred.mask_logits.data, tgt.masks)
    return weights.cls * c_cls + weights.l1 * c_l1 + weights.giou * c_giou + weights.mask * c_mask


def match(pred: Prediction, tgt: Targets, weights: LossWeights = LossWeights()) -> MatchResult:
    return hungarian_match(matching_cost(pred, tgt, weights))


# ---------------------------------------------------------------------------
# loss


def _mask_terms(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean dice loss and mean per-pixel BCE over matched masks."""
    n = targets.shape[0]
    x = T.reshape(logits, (n, int(np.prod(logits.shape[1:]))))
    t = Tensor._wrap(targets.reshape(n, -1))
    p = T.sigmoid(x)
    num = T.tsum(p * t, axis=1) * 2.0 + 1.0
    den = T.tsum(p, axis=1) + Tensor._wrap(t.data.sum(axis=1) + 1.0)
    dice = T.mean(1.0 - num / den)
    bce = T.mean(T.softplus(x) - x * t)
    return dice, bce


def set_loss(pred: Prediction, tgt: Targets, match_result: MatchResult | None = None,
             weights: LossWeights = LossWeights()) -> LossResult:
    """Weighted set loss for one image.

    Unmatched queries are pushed toward "no object" with weight ``eos_coef``.
    Box and mask terms average over ground-truth instances.
    """
    n_q, k1 = pred.class_logits.shape[-2:]
    if pred.class_logits.ndim != 2:
        raise DimensionError("set_loss works on one image; slice batched predictions with .image(b)")
    if match_result is None:
        match_result = match(pred, tgt, weights) if len(tgt) else MatchResult({}, 0.0)
    gt_idx, q_idx = match_result.pairs()
    if len(gt_idx) != len(tgt):
        raise ContractError(f"match covers {len(gt_idx)} of {len(tgt)} ground-truth instances")
    if len(set(q_idx.tolist())) != len(q_idx) or (len(q_idx) and q_idx.max() >= n_q):
        raise ContractError("match is not an injective map into the queries")

    target_cls = np.full(n_q, k1 - 1, dtype=np.int64)
    target_cls[q_idx] = tgt.labels[gt_idx]
    w = np.where(target_cls == k1 - 1, weights.eos_coef, 1.0)
    logp = T.log_softmax(pred.class_logits)
    onehot = np.zeros((n_q, k1))
    onehot[np.arange(n_q), target_cls] = w
    ce = -T.tsum(logp * Tensor._wrap(onehot)) * (1.0 / w.sum())

    comps = {"cls": ce}
    zero = Tensor._wrap(np.zeros(()))
    if len(tgt):
        n = float(len(tgt))
        pb = T.take(pred.boxes, (q_idx,))
        gb = tgt.boxes[gt_idx]
        comps["l1"] = T.tsum(T.absolute(pb - Tensor._wrap(gb))) * (1.0 / n)
        comps["giou"] = T.tsum(1.0 - giou(pb, Tensor._wrap(gb))) * (1.0 / n)
        dice, bce = _mask_terms(T.take(pred.mask_logits, (q_idx,)), tgt.masks[gt_idx])
        comps["dice"], comps["bce"] = dice, bce
        if pred.aux_mask_logits is not None:
            a_dice, a_bce = _mask_terms(T.take(pred.aux_mask_logits, (q_idx,)), tgt.masks[gt_idx])
            comps["aux"] = a_dice + a_bce
    for k in ("l1", "giou", "dice", "bce"):
        comps.setdefault(k, zero)

    total = (comps["cls"] * weights.cls + comps["l1"] * weights.l1 + comps["giou"] * weights.giou
             + (comps["dice"] + comps["bce"]) * weights.mask)
    if "aux" in comps:
        total = total + comps["aux"] * (weights.mask * weights.aux)
    return LossResult(total, {k: float(v.item()) for k, v in comps.items()}, match_result)


__all__ = [
    "LossResult",
    "LossWeights",
    "Prediction",
    "Targets",
    "boxes_from_xywh",
    "boxes_to_xywh",
    "giou",
    "giou_matrix",
    "match",
    "matching_cost",
    "set_loss",
]
