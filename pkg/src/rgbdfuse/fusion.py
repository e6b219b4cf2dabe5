"""RGB-D fusion blocks over pixel-aligned feature maps.

Feature maps are ``C x H x W`` tensors; every function here also accepts a
leading batch axis (``B x C x H x W``). Two-modality blocks take the RGB map
and the depth map separately and return per-modality maps of the same shape.

The attention-mix block works on the concatenated ``C x 2HW`` map: a pointwise
convolution halves the channels, then a reshape lays the RGB and depth
activations of each pixel side by side in one row of width ``C``. Because the
two halves of a row come from different modalities, ``Q @ K.T`` splits into
an RGB-only product plus a depth-only product, with no cross terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

BLOCK_KINDS = ("intra", "inter", "iam", "cdf", "iam+cdf")
BASELINE_KINDS = ("early", "late", "intra", "inter")


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _check_pair(f_rgb: Tensor, f_d: Tensor) -> None:
    if f_rgb.shape != f_d.shape:
        raise DimensionError(f"modalities not pixel-aligned: rgb {f_rgb.shape} vs depth {f_d.shape}")
    if f_rgb.ndim < 3:
        raise DimensionError(f"feature maps must be (..., C, H, W), got {f_rgb.shape}")


def _flatten(f: Tensor) -> Tensor:
    return T.reshape(f, f.shape[:-2] + (f.shape[-2] * f.shape[-1],))


def _unflatten(f: Tensor, h: int, w: int) -> Tensor:
    return T.reshape(f, f.shape[:-1] + (h, w))


@dataclass
class QKVBundle:
    q: Tensor
    k: Tensor
    v: Tensor
    modality_split: int

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise DimensionError(f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        c = self.q.shape[-1]
        if c % 2 or self.modality_split != c // 2:
            raise ContractError(f"modality_split {self.modality_split} must equal C/2 for C={c}")

    def _half(self, t: Tensor, which: int) -> Tensor:
        s = self.modality_split
        return T.split(t, [s, s], axis=-1)[which]

    @property
    def q_rgb(self) -> Tensor:
        return self._half(self.q, 0)

    @property
    def q_d(self) -> Tensor:
        return self._half(self.q, 1)

    @property
    def k_rgb(self) -> Tensor:
        return self._half(self.k, 0)

    @property
    def k_d(self) -> Tensor:
        return self._half(self.k, 1)


@dataclass
class IamParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor
    d_k: int

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "IamParams":
        if channels % 2:
            raise ContractError(f"IAM needs an even channel count, got {channels}")
        half = channels // 2
        return cls(
            w_q=T.uniform_init(rng, (half, channels), channels),
            b_q=_zeros(half),
            w_k=T.uniform_init(rng, (half, channels), channels),
            b_k=_zeros(half),
            w_v=T.uniform_init(rng, (half, channels), channels),
            b_v=_zeros(half),
            w_out=T.uniform_init(rng, (channels, half), half),
            b_out=_zeros(channels),
            d_k=channels,
        )


@dataclass
class CdfParams:
    w_gate: Tensor
    b_gate: Tensor
    w_agg: Tensor
    b_agg: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "CdfParams":
        return cls(
            w_gate=T.uniform_init(rng, (channels, channels), channels),
            b_gate=_zeros(channels),
            w_agg=T.uniform_init(rng, (channels, 2 * channels), 2 * channels),
            b_agg=_zeros(channels),
        )


@dataclass
class FusionOutput:
    f_rgb: Tensor
    f_d: Tensor
    f_agg: Tensor
    w_n: Tensor


# ---------------------------------------------------------------------------
# attention-mix pieces


def concat_modalities(f_rgb: Tensor, f_d: Tensor) -> Tensor:
    """``(C,H,W), (C,H,W) -> (C, 2HW)``; RGB positions first, then depth."""
    _check_pair(f_rgb, f_d)
    return T.concat([_flatten(f_rgb), _flatten(f_d)], axis=-1)


def _reverse_last3(t: Tensor) -> Tensor:
    n = t.ndim
    return T.permute(t, tuple(range(n - 3)) + (n - 1, n - 2, n - 3))


def rows_from_columns(g: Tensor) -> Tensor:
    """``(C/2, 2HW) -> (HW, C)``: row i is ``concat(g[:, i], g[:, HW + i])``."""
    half, two_hw = g.shape[-2:]
    if two_hw % 2:
        raise DimensionError(f"position axis {two_hw} is not 2*HW")
    hw = two_hw // 2
    t = T.reshape(g, g.shape[:-2] + (half, 2, hw))
    return T.reshape(_reverse_last3(t), g.shape[:-2] + (hw, 2 * half))


def columns_from_rows(o: Tensor) -> Tensor:
    """Exact inverse of :func:`rows_from_columns`: ``(HW, C) -> (C/2, 2HW)``."""
    hw, c = o.shape[-2:]
    if c % 2:
        raise ContractError(f"row width {c} must be even")
    t = T.reshape(o, o.shape[:-2] + (hw, 2, c // 2))
    return T.reshape(_reverse_last3(t), o.shape[:-2] + (c // 2, 2 * hw))


def qkv_project(f_rgbd: Tensor, p: IamParams) -> QKVBundle:
    c, two_hw = f_rgbd.shape[-2:]
    if c % 2:
        raise ContractError(f"channel count must be even, got {c}")
    if two_hw < 2 or two_hw % 2:
        raise DimensionError(f"position axis must be 2*HW >= 2, got {two_hw}")
    q = rows_from_columns(T.conv1x1(f_rgbd, p.w_q, p.b_q))
    k = rows_from_columns(T.conv1x1(f_rgbd, p.w_k, p.b_k))
    v = rows_from_columns(T.conv1x1(f_rgbd, p.w_v, p.b_v))
    return QKVBundle(q, k, v, modality_split=c // 2)


def attention_logits(b: QKVBundle, path: str = "full") -> Tensor:
    """Unnormalised ``Q K^T`` by the full product or by the per-modality block sum."""
    if path == "full":
        return T.matmul(b.q, T.transpose(b.k))
    if path == "blocks":
        return T.matmul(b.q_rgb, T.transpose(b.k_rgb)) + T.matmul(b.q_d, T.transpose(b.k_d))
    raise ContractError(f"unknown attention path {path!r}")


def intra_attention_scores(b: QKVBundle, path: str = "full", d_k: int | None = None) -> Tensor:
    d_k = b.q.shape[-1] if d_k is None else d_k
    return T.softmax_rows(attention_logits(b, path), 1.0 / math.sqrt(d_k))


def iam_forward(f_rgb: Tensor, f_d: Tensor, p: IamParams, path: str = "full") -> Tensor:
    """Attention-mix output ``Z`` of shape ``(C, 2HW)``."""
    _check_pair(f_rgb, f_d)
    if f_rgb.shape[-3] % 2:
        raise ContractError(f"channel count must be even, got {f_rgb.shape[-3]}")
    bundle = qkv_project(concat_modalities(f_rgb, f_d), p)
    attn = intra_attention_scores(bundle, path=path, d_k=p.d_k)
    o = T.matmul(attn, bundle.v)
    return T.conv1x1(columns_from_rows(o), p.w_out, p.b_out)


def split_modalities(z: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
    """``(C, 2HW) -> (C,H,W), (C,H,W)``."""
    if z.shape[-1] != 2 * h * w:
        raise DimensionError(f"z has {z.shape[-1]} positions, expected {2 * h * w}")
    zr, zd = T.split(z, [h * w, h * w], axis=-1)
    return _unflatten(zr, h, w), _unflatten(zd, h, w)


def cdf_forward(z: Tensor, f_rgb: Tensor, f_d: Tensor, p: CdfParams) -> FusionOutput:
    _check_pair(f_rgb, f_d)
    c, h, w = f_rgb.shape[-3:]
    if z.shape[-2:] != (c, 2 * h * w) or z.shape[:-2] != f_rgb.shape[:-3]:
        raise DimensionError(f"z shape {z.shape} does not match feature maps {f_rgb.shape}")
    w_n = T.sigmoid(T.global_avg_pool(T.conv1x1(z, p.w_gate, p.b_gate)))
    gate = T.reshape(w_n, w_n.shape + (1, 1))
    rgb = (gate * f_rgb + f_rgb) * 0.5
    dep = ((1.0 - gate) * f_d + f_d) * 0.5
    both = T.concat([_flatten(T.relu(rgb)), _flatten(T.relu(dep))], axis=-2)
    agg = _unflatten(T.conv1x1(both, p.w_agg, p.b_agg), h, w)
    return FusionOutput(f_rgb=rgb, f_d=dep, f_agg=agg, w_n=w_n)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class MergeParams:
    """Channel concat followed by a pointwise conv back to ``c_out`` channels."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator) -> "MergeParams":
        return cls(w=T.uniform_init(rng, (c_out, c_in), c_in), b=_zeros(c_out))


@dataclass
class AttentionParams:
    """Single-direction attention with a residual output projection."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "AttentionParams":
        half = max(channels // 2, 1)
        return cls(
            w_q=T.uniform_init(rng, (half, channels), channels),
            b_q=_zeros(half),
            w_k=T.uniform_init(rng, (half, channels), channels),
            b_k=_zeros(half),
            w_v=T.uniform_init(rng, (half, channels), channels),
            b_v=_zeros(half),
            w_out=T.uniform_init(rng, (channels, half), half),
            b_out=_zeros(channels),
        )

    @classmethod
    def zeros(cls, channels: int) -> "AttentionParams":
        half = max(channels // 2, 1)
        z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
        return cls(z(half, channels), z(half), z(half, channels), z(half), z(half, channels), z(half),
                   z(channels, half), z(channels))


@dataclass
class PairAttentionParams:
    rgb: AttentionParams
    d: AttentionParams

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "PairAttentionParams":
        return cls(AttentionParams.init(channels, rng), AttentionParams.init(channels, rng))


def merge(f_rgb: Tensor, f_d: Tensor, p: MergeParams) -> Tensor:
    if f_rgb.shape[:-3] != f_d.shape[:-3] or f_rgb.shape[-2:] != f_d.shape[-2:]:
        raise DimensionError(f"modalities not pixel-aligned: rgb {f_rgb.shape} vs depth {f_d.shape}")
    h, w = f_rgb.shape[-2:]
    both = T.concat([_flatten(f_rgb), _flatten(f_d)], axis=-2)
    return _unflatten(T.conv1x1(both, p.w, p.b), h, w)


def attend(f_query: Tensor, f_source: Tensor, p: AttentionParams) -> Tensor:
    """``f_query + out(softmax(Q K^T / sqrt(d)) V)`` with keys/values from ``f_source``."""
    h, w = f_query.shape[-2:]
    q = T.transpose(T.conv1x1(_flatten(f_query), p.w_q, p.b_q))
    k = T.transpose(T.conv1x1(_flatten(f_source), p.w_k, p.b_k))
    v = T.transpose(T.conv1x1(_flatten(f_source), p.w_v, p.b_v))
    attn = T.softmax_rows(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    o = T.transpose(T.matmul(attn, v))
    return f_query + _unflatten(T.conv1x1(o, p.w_out, p.b_out), h, w)


def fuse_baseline(kind: str, f_rgb: Tensor, f_d: Tensor, params):
    """Baseline fusion strategies.

    ``early`` and ``late`` return one merged map (the model decides where the
    merge sits); ``intra`` and ``inter`` return the enhanced ``(rgb, depth)``
    pair.
    """
    if kind in ("early", "late"):
        return merge(f_rgb, f_d, params)
    if kind == "intra":
        _check_pair(f_rgb, f_d)
        return attend(f_rgb, f_rgb, params.rgb), attend(f_d, f_d, params.d)
    if kind == "inter":
        _check_pair(f_rgb, f_d)
        return attend(f_rgb, f_d, params.rgb), attend(f_d, f_rgb, params.d)
    raise ContractError(f"unknown baseline fusion kind {kind!r}; expected one of {BASELINE_KINDS}")


# ---------------------------------------------------------------------------
# stage-level blocks used by the two-stream encoder


@dataclass
class BlockParams:
    kind: str
    iam: IamParams | None = None
    cdf: CdfParams | None = None
    pair: PairAttentionParams | None = None
    merge: MergeParams | None = None


def init_block(kind: str, channels: int, rng: np.random.Generator) -> BlockParams:
    if kind == "iam+cdf":
        return BlockParams(kind, iam=IamParams.init(channels, rng), cdf=CdfParams.init(channels, rng))
    if kind == "iam":
        return BlockParams(kind, iam=IamParams.init(channels, rng), merge=MergeParams.init(2 * channels, channels, rng))
    if kind == "cdf":
        return BlockParams(kind, cdf=CdfParams.init(channels, rng))
    if kind in ("intra", "inter"):
        return BlockParams(kind, pair=PairAttentionParams.init(channels, rng),
                           merge=MergeParams.init(2 * channels, channels, rng))
    raise ContractError(f"unknown fusion block kind {kind!r}; expected one of {BLOCK_KINDS}")


def apply_block(f_rgb: Tensor, f_d: Tensor, p: BlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Run one fusion block and return ``(f_rgb', f_d', f_agg)``.

    Blocks without their own aggregation path (iam-only, intra, inter) build
    ``f_agg`` with a concat + pointwise-conv merge of the ReLU'd outputs.
    """
    _check_pair(f_rgb, f_d)
    h, w = f_rgb.shape[-2:]
    if p.kind == "iam+cdf":
        z = iam_forward(f_rgb, f_d, p.iam)
        out = cdf_forward(z, f_rgb, f_d, p.cdf)
        return out.f_rgb, out.f_d, out.f_agg
    if p.kind == "cdf":
        out = cdf_forward(concat_modalities(f_rgb, f_d), f_rgb, f_d, p.cdf)
        return out.f_rgb, out.f_d, out.f_agg
    if p.kind == "iam":
        zr, zd = split_modalities(iam_forward(f_rgb, f_d, p.iam), h, w)
        rgb, dep = f_rgb + zr, f_d + zd
    elif p.kind in ("intra", "inter"):
        rgb, dep = fuse_baseline(p.kind, f_rgb, f_d, p.pair)
    else:
        raise ContractError(f"unknown fusion block kind {p.kind!r}")
    return rgb, dep, merge(T.relu(rgb), T.relu(dep), p.merge)
