"""Seeded finite-difference checks for the differentiable building blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .fusion import CdfParams, IamParams, cdf_forward, iam_forward
from .losses import LossWeights, Prediction, Targets, match, set_loss
from .tensor import Tensor

MODULES = ("matmul", "softmax_rows", "conv1x1", "conv2d", "iam", "cdf", "set_loss")


def _u(rng, *shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _reduced(out: Tensor, weights: np.ndarray | None) -> Tensor:
    return T.tsum(out) if weights is None else T.tsum(out * Tensor._wrap(weights))


def _case(name: str, rng: np.random.Generator):
    """``(fn(*inputs, weights) -> Tensor, inputs, output shape)`` for one module."""
    if name == "matmul":
        return (lambda a, b: T.matmul(a, b)), [_u(rng, 5, 7), _u(rng, 7, 3)]
    if name == "softmax_rows":
        return (lambda m: T.softmax_rows(m, 0.7)), [_u(rng, 4, 4)]
    if name == "conv1x1":
        return (lambda f, w, b: T.conv1x1(f, w, b)), [_u(rng, 4, 6), _u(rng, 2, 4), _u(rng, 2)]
    if name == "conv2d":
        return (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)), [_u(rng, 2, 3, 6, 6), _u(rng, 4, 3, 3, 3), _u(rng, 4)]
    if name == "iam":
        c, h, w = 4, 2, 2
        shapes = [(c // 2, c), (c // 2,), (c // 2, c), (c // 2,), (c // 2, c), (c // 2,), (c, c // 2), (c,)]

        def fn(f_rgb, f_d, *p):
            return iam_forward(f_rgb, f_d, IamParams(*p, d_k=c))

        return fn, [_u(rng, c, h, w), _u(rng, c, h, w)] + [_u(rng, *s) for s in shapes]
    if name == "cdf":
        c, h, w = 4, 2, 3

        def fn(z, f_rgb, f_d, wg, bg, wa, ba):
            out = cdf_forward(z, f_rgb, f_d, CdfParams(wg, bg, wa, ba))
            return T.concat([T.reshape(out.f_rgb, (-1,)), T.reshape(out.f_d, (-1,)),
                             T.reshape(out.f_agg, (-1,)), out.w_n], axis=0)

        return fn, [_u(rng, c, 2 * h * w), _u(rng, c, h, w), _u(rng, c, h, w),
                    _u(rng, c, c), _u(rng, c), _u(rng, c, 2 * c), _u(rng, c)]
    if name == "set_loss":
        n_q, k, g = 6, 2, 4
        n_gt = 3
        centers = rng.uniform(0.3, 0.7, size=(n_gt, 2))
        sizes = rng.uniform(0.1, 0.4, size=(n_gt, 2))
        tgt = Targets(rng.integers(0, k, size=n_gt), np.concatenate([centers, sizes], axis=1),
                      rng.uniform(0, 1, size=(n_gt, g, g)))
        inputs = [_u(rng, n_q, k + 1), _u(rng, n_q, 4), _u(rng, n_q, g, g)]
        probe = Prediction(Tensor(inputs[0]), T.sigmoid(Tensor(inputs[1])), Tensor(inputs[2]))
        m = match(probe, tgt, LossWeights())

        def fn(logits, box_raw, masks):
            pred = Prediction(logits, T.sigmoid(box_raw), masks)
            return T.reshape(set_loss(pred, tgt, m, LossWeights()).total, (1,))

        return fn, inputs
    raise ContractError(f"unknown gradcheck module {name!r}; expected one of {MODULES}")


def check_module(name: str, seed: int, h: float = 1e-5) -> float:
    """Max relative error over two reductions of the module output: plain sum and a random weighting."""
    rng = np.random.default_rng(seed)
    fn, inputs = _case(name, rng)
    shape = fn(*[Tensor(x) for x in inputs]).shape
    weights = rng.normal(size=shape)
    worst = 0.0
    for w in (None, weights):
        worst = max(worst, T.gradient_check(lambda *xs, w=w: _reduced(fn(*xs), w), inputs, h=h))
    return worst


__all__ = ["MODULES", "check_module"]
