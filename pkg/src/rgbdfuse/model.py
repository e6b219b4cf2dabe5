"""Two-stream RGB-D encoder with fusion-block insertion and a query-based head.

Parameters live in a flat ``dict[str, Tensor]``. Tensors are immutable, so an
optimiser step produces a new dict; the fusion dataclasses are rebuilt from
the dict on every forward pass.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data.scenes import SceneSample
from .errors import ConfigurationError, ContractError, DimensionError
from .fusion import BlockParams, MergeParams, apply_block, init_block, merge
from .losses import Prediction, Targets, boxes_from_xywh, boxes_to_xywh
from .tensor import Tensor

FUSION_KINDS = ("none", "early", "late", "intra", "inter", "iam", "cdf", "iam+cdf")
FUSION_ALIASES = {"rgb": "none", "rgb-only": "none", "iam-only": "iam", "cdf-only": "cdf"}
ROUTING_DESIGNS = ("A", "B", "C", "D")
BLOCK_FUSIONS = ("intra", "inter", "iam", "cdf", "iam+cdf")


def canonical_kind(kind: str) -> str:
    kind = FUSION_ALIASES.get(kind, kind)
    if kind not in FUSION_KINDS:
        raise ConfigurationError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS} or {tuple(FUSION_ALIASES)}")
    return kind


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    # (channels, stride) per encoder stage
    blocks: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 1), (64, 1))
    fusion_kind: str = "iam+cdf"
    # fusion blocks after stages 2, 3, 4; stage 1 never carries one
    insertion_mask: tuple[bool, bool, bool] = (True, True, True)
    routing_design: str = "C"
    num_queries: int = 8
    num_classes: int = 2
    hidden_dim: int = 64
    depth_scale: float = 12000.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion_kind", canonical_kind(self.fusion_kind))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple((int(c), int(s)) for c, s in self.blocks))
        object.__setattr__(self, "insertion_mask", tuple(bool(b) for b in self.insertion_mask))
        if len(self.blocks) != 4:
            raise ConfigurationError(f"encoder needs 4 stages, got {len(self.blocks)}")
        if len(self.insertion_mask) != 3:
            raise ConfigurationError("insertion_mask covers stages 2, 3 and 4 (three booleans)")
        if self.routing_design not in ROUTING_DESIGNS:
            raise ConfigurationError(f"unknown routing design {self.routing_design!r}")
        if self.num_queries < 1 or self.num_classes < 1 or self.hidden_dim < 1:
            raise ConfigurationError("num_queries, num_classes and hidden_dim must be positive")
        h, w = self.input_size
        for c, s in self.blocks:
            if c < 1 or s < 1:
                raise ConfigurationError(f"invalid stage spec {(c, s)}")
            if h % s or w % s:
                raise ConfigurationError(f"stride {s} does not divide feature size {(h, w)}")
            h, w = h // s, w // s
        if self.fusion_kind in ("iam", "iam+cdf"):
            for i, on in enumerate(self.insertion_mask, start=1):
                if on and self.blocks[i][0] % 2:
                    raise ConfigurationError(f"stage {i + 1} has odd channel count {self.blocks[i][0]}")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for _, s in self.blocks:
            h, w = h // s, w // s
        return h, w

    @property
    def two_stream(self) -> bool:
        return self.fusion_kind not in ("none", "early")

    def block_stages(self) -> list[int]:
        """0-based stage indices that carry a fusion block."""
        if self.fusion_kind not in BLOCK_FUSIONS:
            return []
        return [i + 1 for i, on in enumerate(self.insertion_mask) if on]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["blocks"] = [list(b) for b in self.blocks]
        d["insertion_mask"] = list(self.insertion_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter handling


def _flatten_into(obj, prefix: str, out: dict) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, Tensor):
            out[f"{prefix}.{f.name}"] = v
        elif dataclasses.is_dataclass(v):
            _flatten_into(v, f"{prefix}.{f.name}", out)


def _rebuild(template, prefix: str, flat: dict):
    changes = {}
    for f in dataclasses.fields(template):
        v = getattr(template, f.name)
        if isinstance(v, Tensor):
            changes[f.name] = flat[f"{prefix}.{f.name}"]
        elif dataclasses.is_dataclass(v):
            changes[f.name] = _rebuild(v, f"{prefix}.{f.name}", flat)
    return dataclasses.replace(template, **changes)


def _lin(rng, name: str, n_out: int, n_in: int, out: dict) -> None:
    """Row-vector linear layer ``x @ w + b`` with ``w`` of shape ``n_in x n_out``."""
    out[f"{name}.w"] = T.uniform_init(rng, (n_in, n_out), n_in)
    out[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    p: dict[str, Tensor] = {}
    streams = [("rgb", 3)] + ([("depth", 1)] if cfg.two_stream else [])
    for name, c_in in streams:
        c = c_in
        for i, (c_out, _) in enumerate(cfg.blocks):
            p[f"{name}.s{i + 1}.w"] = T.uniform_init(rng, (c_out, c, 3, 3), 9 * c)
            p[f"{name}.s{i + 1}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            c = c_out
    if cfg.fusion_kind == "early":
        _flatten_into(MergeParams.init(4, 3, rng), "early", p)
    for i in cfg.block_stages():
        _flatten_into(init_block(cfg.fusion_kind, cfg.blocks[i][0], rng), f"block{i + 1}", p)
    c_last = cfg.blocks[-1][0]
    if cfg.fusion_kind == "late" or (cfg.fusion_kind in BLOCK_FUSIONS and 3 not in cfg.block_stages()):
        _flatten_into(MergeParams.init(2 * c_last, c_last, rng), "final", p)

    d, n_q = cfg.hidden_dim, cfg.num_queries
    p["head.query"] = T.uniform_init(rng, (n_q, d), 1)
    _lin(rng, "head.det_proj", d, c_last, p)
    _lin(rng, "head.seg_proj", d, c_last, p)
    if cfg.routing_design == "D":
        _lin(rng, "head.aux_proj", d, c_last, p)
    for att in ("att1", "att2"):
        for part in ("q", "k", "v", "o"):
            _lin(rng, f"head.{att}.{part}", d, d, p)
    for ffn in ("ffn1", "ffn2"):
        _lin(rng, f"head.{ffn}.up", 2 * d, d, p)
        _lin(rng, f"head.{ffn}.down", d, 2 * d, p)
    _lin(rng, "head.box1", d, d, p)
    _lin(rng, "head.box2", 4, d, p)
    _lin(rng, "head.pool", d, d, p)
    _lin(rng, "head.cls1", d, d, p)
    _lin(rng, "head.cls", cfg.num_classes + 1, d, p)
    _lin(rng, "head.mask", d, d, p)
    for k, v in p.items():
        v.tag = k
    return p


def _block_templates(cfg: ModelConfig) -> dict[int, BlockParams]:
    rng = np.random.default_rng(0)
    return {i: init_block(cfg.fusion_kind, cfg.blocks[i][0], rng) for i in cfg.block_stages()}


def check_params(cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    ref = {k: v.shape for k, v in init_params(dataclasses.replace(cfg, seed=0)).items()}
    missing = sorted(set(ref) - set(params))
    extra = sorted(set(params) - set(ref))
    if missing or extra:
        raise ConfigurationError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, shape in ref.items():
        if params[k].shape != shape:
            raise ConfigurationError(f"parameter {k} has shape {params[k].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# inputs


def normalize_inputs(rgb: np.ndarray, depth: np.ndarray, depth_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """uint8 ``(..., H, W, 3)`` and uint16 ``(..., H, W)`` -> ``(..., 3, H, W)``, ``(..., 1, H, W)``."""
    x = (np.asarray(rgb, dtype=np.float64) / 255.0 - 0.5) / 0.25
    x = np.moveaxis(x, -1, -3)
    d = (np.asarray(depth, dtype=np.float64) / depth_scale - 0.5) / 0.25
    return x, d[..., None, :, :]


def batch_inputs(samples: list[SceneSample], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    for s in samples:
        if (s.height, s.width) != cfg.input_size:
            raise DimensionError(f"sample is {(s.height, s.width)}, model expects {cfg.input_size}")
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    x, d = normalize_inputs(rgb, depth, cfg.depth_scale)
    return Tensor._wrap(x), Tensor._wrap(d)


def pool_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Average-pool a full-resolution binary mask onto the feature grid (soft target)."""
    H, W = mask.shape
    h, w = size
    if H % h or W % w:
        raise DimensionError(f"mask {mask.shape} does not tile onto grid {size}")
    return mask.astype(np.float64).reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def targets_for(sample: SceneSample, cfg: ModelConfig) -> Targets:
    H, W = sample.height, sample.width
    masks = [np.asarray(m, dtype=bool) for m in sample.instance_masks]
    keep = [i for i, m in enumerate(masks) if m.any()]
    grid = cfg.feature_size
    return Targets(
        labels=[sample.categories[i] - 1 for i in keep],
        boxes=boxes_from_xywh([sample.boxes[i] for i in keep], H, W) if keep else np.zeros((0, 4)),
        masks=np.stack([pool_mask(masks[i], grid) for i in keep]) if keep else np.zeros((0,) + grid),
    )


# ---------------------------------------------------------------------------
# forward


@dataclass
class BackboneOutput:
    rgb_stages: list[Tensor]
    depth_stages: list[Tensor | None]
    agg_stages: dict[int, Tensor]
    f_rgb: Tensor
    f_agg: Tensor


def backbone_forward(x_rgb: Tensor, x_d: Tensor, cfg: ModelConfig, params: dict,
                     templates: dict[int, BlockParams] | None = None) -> BackboneOutput:
    """Run both streams; fusion blocks at flagged stages re-inject enhanced maps."""
    if tuple(x_rgb.shape[-2:]) != cfg.input_size:
        raise DimensionError(f"input is {x_rgb.shape[-2:]}, model expects {cfg.input_size}")
    if templates is None:
        templates = _block_templates(cfg)
    kind = cfg.fusion_kind
    f_rgb = x_rgb
    f_d = x_d if cfg.two_stream else None
    if kind == "early":
        f_rgb = merge(x_rgb, x_d, MergeParams(params["early.w"], params["early.b"]))
    rgb_stages, depth_stages, aggs = [], [], {}
    for i, (_, stride) in enumerate(cfg.blocks):
        f_rgb = T.relu(T.conv2d(f_rgb, params[f"rgb.s{i + 1}.w"], params[f"rgb.s{i + 1}.b"], stride, 1))
        if f_d is not None:
            f_d = T.relu(T.conv2d(f_d, params[f"depth.s{i + 1}.w"], params[f"depth.s{i + 1}.b"], stride, 1))
        if i in templates:
            bp = _rebuild(templates[i], f"block{i + 1}", params)
            f_rgb, f_d, aggs[i] = apply_block(f_rgb, f_d, bp)
        rgb_stages.append(f_rgb)
        depth_stages.append(f_d)
    last = len(cfg.blocks) - 1
    if kind in ("none", "early"):
        f_agg = f_rgb
    elif last in aggs:
        f_agg = aggs[last]
    else:
        f_agg = merge(f_rgb, f_d, MergeParams(params["final.w"], params["final.b"]))
    return BackboneOutput(rgb_stages, depth_stages, aggs, f_rgb, f_agg)


def route_features(design: str, f_rgb: Tensor, f_agg: Tensor) -> tuple[Tensor, Tensor]:
    """``(detection input, segmentation input)`` for routing design A-D.

    C sends RGB to detection and the aggregate to segmentation. A, B and D are
    reconstructions: A uses the aggregate for both, B swaps C, D uses RGB for
    both (the aggregate then only feeds an auxiliary mask loss).
    """
    if f_rgb.shape != f_agg.shape:
        raise DimensionError(f"routed maps differ in shape: {f_rgb.shape} vs {f_agg.shape}")
    table = {"A": (f_agg, f_agg), "B": (f_agg, f_rgb), "C": (f_rgb, f_agg), "D": (f_rgb, f_rgb)}
    if design not in table:
        raise ContractError(f"unknown routing design {design!r}; expected one of {ROUTING_DESIGNS}")
    return table[design]


_PE_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine code, ``HW x d``: half the channels for y, half for x."""
    key = (h, w, d)
    if key not in _PE_CACHE:
        quarter = max(d // 4, 1)
        freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
        yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        parts = []
        for coord in (yy, xx):
            ang = coord.reshape(-1, 1) * freq[None, :] * (np.pi / 2)
            parts += [np.sin(ang), np.cos(ang)]
        pe = np.concatenate(parts, axis=1)
        out = np.zeros((h * w, d))
        out[:, : min(d, pe.shape[1])] = pe[:, :d]
        out.setflags(write=False)
        _PE_CACHE[key] = out
    return _PE_CACHE[key]


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _memory(f: Tensor, params: dict, name: str) -> Tensor:
    """``(B, C, h, w)`` -> ``(B, hw, D)`` projected tokens plus positional code."""
    b, c, h, w = f.shape
    tokens = T.transpose(T.reshape(f, (b, c, h * w)))
    return _linear(tokens, params, name) + Tensor._wrap(positional_encoding(h, w, params[f"{name}.b"].shape[0]))


def _cross_attend(q_in: Tensor, mem: Tensor, params: dict, name: str) -> Tensor:
    q = _linear(q_in, params, f"{name}.q")
    k = _linear(mem, params, f"{name}.k")
    v = _linear(mem, params, f"{name}.v")
    attn = T.softmax_rows(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return _linear(T.matmul(attn, v), params, f"{name}.o")


def _ffn(x: Tensor, params: dict, name: str) -> Tensor:
    return _linear(T.relu(_linear(x, params, f"{name}.up")), params, f"{name}.down")


@dataclass
class ForwardOutput:
    prediction: Prediction
    backbone: BackboneOutput
    det_input: Tensor
    seg_input: Tensor


def forward(cfg: ModelConfig, params: dict, x_rgb: Tensor, x_d: Tensor,
            templates: dict[int, BlockParams] | None = None) -> ForwardOutput:
    """Batched forward pass: inputs ``(B,3,H,W)`` and ``(B,1,H,W)``."""
    bb = backbone_forward(x_rgb, x_d, cfg, params, templates)
    f_rgb, f_agg = bb.f_rgb, bb.f_agg
    f_rgb.tag, f_agg.tag = "f_rgb", ("f_rgb" if f_agg is f_rgb else "f_agg")
    det_in, seg_in = route_features(cfg.routing_design, f_rgb, f_agg)
    h, w = det_in.shape[-2:]
    d = cfg.hidden_dim
    det_mem = _memory(det_in, params, "head.det_proj")
    seg_mem = _memory(seg_in, params, "head.seg_proj")
    query = params["head.query"]
    e1 = query + _cross_attend(query, det_mem, params, "head.att1")
    e1 = e1 + _ffn(e1, params, "head.ffn1")
    boxes = T.sigmoid(_linear(T.relu(_linear(e1, params, "head.box1")), params, "head.box2"))
    e2 = e1 + _cross_attend(e1, seg_mem, params, "head.att2")
    e2 = e2 + _ffn(e2, params, "head.ffn2")
    emb = _linear(e2, params, "head.mask")
    inv = 1.0 / math.sqrt(d)
    b = det_in.shape[0]
    flat = T.matmul(emb, T.transpose(seg_mem)) * inv
    masks = T.reshape(flat, (b, cfg.num_queries, h, w))
    # classify from the query state plus the features under its own soft mask
    soft = T.sigmoid(flat)
    pooled = T.matmul(soft, seg_mem) / (T.tsum(soft, axis=-1, keepdims=True) + 1.0)
    e3 = e2 + _linear(pooled, params, "head.pool")
    logits = _linear(T.relu(_linear(e3, params, "head.cls1")), params, "head.cls")
    aux = None
    if cfg.routing_design == "D":
        aux_mem = _memory(f_agg, params, "head.aux_proj")
        aux = T.reshape(T.matmul(emb, T.transpose(aux_mem)) * inv, (b, cfg.num_queries, h, w))
    pred = Prediction(logits, boxes, masks, aux, meta={"det_tag": det_in.tag, "seg_tag": seg_in.tag})
    return ForwardOutput(pred, bb, det_in, seg_in)


class Model:
    """Config + parameters + cached block templates."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        if params is not None:
            check_params(cfg, params)
        self._templates = _block_templates(cfg)

    def __call__(self, samples: list[SceneSample], params: dict | None = None) -> ForwardOutput:
        x, d = batch_inputs(samples, self.cfg)
        return forward(self.cfg, self.params if params is None else params, x, d, self._templates)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def save(self, directory) -> Path:
        return save_checkpoint(directory, self.cfg, self.params)

    @classmethod
    def load(cls, directory) -> "Model":
        cfg, params = load_checkpoint(directory)
        return cls(cfg, params)


# ---------------------------------------------------------------------------
# inference


def upsample_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of the last two axes."""
    h, w = x.shape[-2:]

    def weights(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - frac
        m[np.arange(n_out), hi] += frac
        return m

    ry, rx = weights(height, h), weights(width, w)
    return np.matmul(np.matmul(ry, x), rx.T)


@dataclass
class ImageDetections:
    scores: np.ndarray
    categories: np.ndarray
    boxes: np.ndarray  # pixel [x, y, w, h]
    masks: np.ndarray  # bool N x H x W
    extra: dict = field(default_factory=dict)


def decode_predictions(pred: Prediction, cfg: ModelConfig) -> list[ImageDetections]:
    """Turn batched head outputs into per-image scored detections (one per query)."""
    H, W = cfg.input_size
    logits = pred.class_logits.data
    z = logits - logits.max(-1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    out = []
    for b in range(logits.shape[0]):
        fg = prob[b, :, :-1]
        cats = fg.argmax(-1)
        scores = fg[np.arange(len(cats)), cats]
        masks = upsample_bilinear(pred.mask_logits.data[b], H, W) > 0.0
        boxes = boxes_to_xywh(pred.boxes.data[b], H, W)
        out.append(ImageDetections(scores, cats + 1, boxes, masks))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, cfg: ModelConfig, params: dict[str, Tensor]) -> Path:
    """Manifest JSON (block -> parameter -> file) plus one TNSR1 file per tensor."""
    out = Path(directory)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    blocks: dict[str, dict[str, str]] = {}
    for name in sorted(params):
        block, _, leaf = name.rpartition(".")
        fname = f"tensors/{name}.tnsr"
        T.save_tensor(out / fname, params[name])
        blocks.setdefault(block, {})[leaf] = fname
    manifest = {"format": "TNSR1", "model_config": cfg.to_dict(), "blocks": blocks}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_checkpoint(directory) -> tuple[ModelConfig, dict[str, Tensor]]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = ModelConfig.from_dict(manifest["model_config"])
    params = {}
    for block, leaves in manifest["blocks"].items():
        for leaf, fname in leaves.items():
            t = T.load_tensor(root / fname)
            name = f"{block}.{leaf}"
            params[name] = Tensor(t.data, requires_grad=True, tag=name)
    check_params(cfg, params)
    return cfg, params


__all__ = [
    "BLOCK_FUSIONS",
    "FUSION_KINDS",
    "ROUTING_DESIGNS",
    "BackboneOutput",
    "ForwardOutput",
    "ImageDetections",
    "Model",
    "ModelConfig",
    "backbone_forward",
    "batch_inputs",
    "canonical_kind",
    "decode_predictions",
    "forward",
    "init_params",
    "load_checkpoint",
    "pool_mask",
    "positional_encoding",
    "route_features",
    "save_checkpoint",
    "targets_for",
    "upsample_bilinear",
]
