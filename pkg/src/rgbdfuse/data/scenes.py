"""Synthetic RGB-D scenes with per-instance masks.

Two colour regimes matter for the fusion experiments:

* ``distinct`` - every instance gets its own colour and instances never touch,
  so RGB alone separates them.
* ``ambiguous`` - all instances in an image share one colour and each touches
  or overlaps another. Their outlines vanish from the RGB image and survive
  only as depth discontinuities.

Depth is 16-bit, larger = farther. Overlaps are resolved with a z-buffer, so a
pixel always belongs to the nearest instance covering it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, GenerationError
from .masks import tight_bbox

CATEGORIES = [{"id": 1, "name": "box"}, {"id": 2, "name": "disk"}]
SHAPE_CATEGORY = {"rect": 1, "ellipse": 2}

_PALETTE = np.array(
    [
        [220, 60, 50], [60, 170, 75], [40, 90, 200], [235, 200, 40], [150, 60, 180],
        [40, 190, 200], [240, 130, 40], [200, 80, 150], [120, 120, 40], [90, 40, 20],
    ],
    dtype=np.uint8,
)
_BACKGROUNDS = np.array([[30, 30, 30], [200, 200, 200], [110, 110, 130]], dtype=np.uint8)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_instances: int = 2
    max_instances: int = 4
    shapes: tuple[str, ...] = ("rect", "ellipse")
    color_mode: str = "distinct"
    depth_mode: str = "flat"
    min_size: int = 14
    max_size: int = 28
    min_depth_gap: int = 600
    gradient_span: int = 300
    background_depth: int = 12000
    near_depth: int = 1500
    min_visible_pixels: int = 40
    min_visible_fraction: float = 0.35
    max_retries: int = 500

    def __post_init__(self):
        if self.color_mode not in ("distinct", "ambiguous"):
            raise ContractError(f"color_mode must be distinct or ambiguous, got {self.color_mode!r}")
        if self.depth_mode not in ("flat", "gradient"):
            raise ContractError(f"depth_mode must be flat or gradient, got {self.depth_mode!r}")
        if not set(self.shapes) <= set(SHAPE_CATEGORY) or not self.shapes:
            raise ContractError(f"unknown shapes {self.shapes}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ContractError("instance count range is empty")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ContractError("shape size range does not fit the image")


@dataclass
class SceneSample:
    rgb: np.ndarray
    depth: np.ndarray
    instance_masks: list[np.ndarray]
    categories: list[int]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def boxes(self) -> list[list[int]]:
        return [tight_bbox(m) for m in self.instance_masks]

    def equals(self, other: "SceneSample") -> bool:
        return (
            self.rgb.tobytes() == other.rgb.tobytes()
            and self.depth.tobytes() == other.depth.tobytes()
            and self.categories == other.categories
            and len(self.instance_masks) == len(other.instance_masks)
            and all(np.array_equal(a, b) for a, b in zip(self.instance_masks, other.instance_masks))
        )


def _footprint(shape: str, x0: int, y0: int, w: int, h: int, H: int, W: int) -> np.ndarray:
    m = np.zeros((H, W), dtype=bool)
    if shape == "rect":
        m[y0 : y0 + h, x0 : x0 + w] = True
        return m
    yy, xx = np.mgrid[0:H, 0:W]
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    m[:] = ((xx + 0.5 - cx) / (w / 2.0)) ** 2 + ((yy + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
    return m


def _touching(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(
        (a[:, :-1] & b[:, 1:]).any() or (a[:, 1:] & b[:, :-1]).any()
        or (a[:-1] & b[1:]).any() or (a[1:] & b[:-1]).any()
    )


def _attempt(cfg: SceneConfig, rng: np.random.Generator, n: int):
    H, W = cfg.height, cfg.width
    placed = []  # (shape, x0, y0, w, h, footprint)
    for _ in range(n):
        for _try in range(50):
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            if cfg.color_mode == "ambiguous" and placed:
                _, ax, ay, aw, ah, _ = placed[int(rng.integers(len(placed)))]
                cx = ax + aw / 2.0 + rng.uniform(-(aw + w) / 2.0, (aw + w) / 2.0)
                cy = ay + ah / 2.0 + rng.uniform(-(ah + h) / 2.0, (ah + h) / 2.0)
                x0 = int(np.clip(round(cx - w / 2.0), 0, W - w))
                y0 = int(np.clip(round(cy - h / 2.0), 0, H - h))
            else:
                x0 = int(rng.integers(0, W - w + 1))
                y0 = int(rng.integers(0, H - h + 1))
            fp = _footprint(shape, x0, y0, w, h, H, W)
            if cfg.color_mode == "distinct":
                # one-pixel moat so instances never touch
                grown = fp.copy()
                grown[1:] |= fp[:-1]
                grown[:-1] |= fp[1:]
                grown[:, 1:] |= grown[:, :-1]
                grown[:, :-1] |= grown[:, 1:]
                if any((grown & p[5]).any() for p in placed):
                    continue
            placed.append((shape, x0, y0, w, h, fp))
            break
        else:
            return None

    # depth ordering: instance slots separated by gap + span so ordering is strict per pixel
    step = cfg.min_depth_gap + (cfg.gradient_span if cfg.depth_mode == "gradient" else 0)
    max_base = cfg.background_depth - cfg.min_depth_gap - step
    n_slots = (max_base - cfg.near_depth) // step + 1
    if n_slots < n:
        raise ContractError("depth range too small for the requested instance count")
    slots = np.sort(rng.choice(n_slots, size=n, replace=False))
    order = rng.permutation(n)
    bases = np.empty(n, dtype=np.int64)
    bases[order] = cfg.near_depth + slots * step

    depth = np.full((H, W), float(cfg.background_depth))
    owner = np.full((H, W), -1, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    for i, (_, x0, y0, w, h, fp) in enumerate(placed):
        d = np.full((H, W), float(bases[i]))
        if cfg.depth_mode == "gradient":
            gx, gy = rng.uniform(-1.0, 1.0, size=2)
            ramp = gx * (xx - x0) / max(w - 1, 1) + gy * (yy - y0) / max(h - 1, 1)
            ramp = (ramp - ramp[fp].min()) / max(np.ptp(ramp[fp]), 1e-9)
            d = d + np.floor(ramp * cfg.gradient_span)
        closer = fp & (d < depth)
        depth[closer] = d[closer]
        owner[closer] = i

    masks = [owner == i for i in range(n)]
    for m, p in zip(masks, placed):
        need = max(cfg.min_visible_pixels, cfg.min_visible_fraction * p[5].sum())
        if m.sum() < need:
            return None
    if cfg.color_mode == "ambiguous" and n > 1:
        for i in range(n):
            if not any(_touching(masks[i], masks[j]) for j in range(n) if j != i):
                return None

    bg = _BACKGROUNDS[int(rng.integers(len(_BACKGROUNDS)))]
    rgb = np.empty((H, W, 3), dtype=np.uint8)
    rgb[:] = bg
    if cfg.color_mode == "ambiguous":
        colors = [_PALETTE[int(rng.integers(len(_PALETTE)))]] * n
    else:
        colors = [_PALETTE[i] for i in rng.choice(len(_PALETTE), size=n, replace=False)]
    for m, c in zip(masks, colors):
        rgb[m] = c
    categories = [SHAPE_CATEGORY[p[0]] for p in placed]
    return rgb, depth.astype(np.uint16), masks, categories


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Render one scene; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    for _ in range(cfg.max_retries):
        out = _attempt(cfg, rng, n)
        if out is not None:
            rgb, depth, masks, cats = out
            return SceneSample(rgb, depth, masks, cats, seed=seed)
    raise GenerationError(f"could not place {n} instances after {cfg.max_retries} attempts (seed {seed})")


def generate_dataset(cfg: SceneConfig, count: int, seed: int) -> list[SceneSample]:
    """``count`` scenes; scene ``i`` is seeded from ``(seed, i)``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_scene(cfg, int(s)) for s in seeds]
