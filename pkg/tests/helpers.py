"""Shared generators for the data tests and the acceptance suite."""

import numpy as np

from rgbdfuse.data.scenes import SceneSample


def random_mask(rng: np.random.Generator, max_side: int = 16) -> np.ndarray:
    """Nonempty random mask: union of a few rectangles and ellipses plus salt noise."""
    h, w = (int(v) for v in rng.integers(1, max_side + 1, 2))
    m = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.5, h / 2 + 1), rng.uniform(0.5, w / 2 + 1)
        if rng.random() < 0.5:
            m |= (np.abs(yy + 0.5 - cy) <= ry) & (np.abs(xx + 0.5 - cx) <= rx)
        else:
            m |= ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1
    m ^= rng.random((h, w)) < rng.choice([0.0, 0.05, 0.2])
    if not m.any():
        m[int(rng.integers(h)), int(rng.integers(w))] = True
    return m


def has_hole(m: np.ndarray) -> bool:
    """Background pixels not 4-connected to the border."""
    from collections import deque

    h, w = m.shape
    seen = np.zeros((h + 2, w + 2), dtype=bool)
    bg = ~np.pad(m, 1)
    queue = deque([(0, 0)])
    seen[0, 0] = True
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h + 2 and 0 <= cc < w + 2 and bg[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                queue.append((rr, cc))
    return bool((bg & ~seen).any())


def random_sample(rng: np.random.Generator, h: int = 20, w: int = 24, max_instances: int = 4) -> SceneSample:
    """Sample with nonoverlapping random rectangle instances; may have zero instances."""
    owner = np.zeros((h, w), dtype=np.int64)
    n = int(rng.integers(0, max_instances + 1))
    for i in range(1, n + 1):
        y0, x0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        owner[y0 : y0 + int(rng.integers(1, h // 2)), x0 : x0 + int(rng.integers(1, w // 2))] = i
    ids = [i for i in range(1, n + 1) if (owner == i).any()]
    masks = [owner == i for i in ids]
    rgb = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    depth = rng.integers(0, 65536, (h, w), dtype=np.uint16)
    return SceneSample(rgb, depth, masks, [int(rng.integers(1, 3)) for _ in masks])
