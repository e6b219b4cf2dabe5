"""Binary mask conversions: grid-boundary polygons and COCO run-length encoding.

Polygons use pixel-corner coordinates: pixel ``(r, c)`` covers the square
``[c, c+1] x [r, r+1]`` and polygons are flat ``[x0, y0, x1, y1, ...]`` lists.
Outer boundaries have positive shoelace area (the ``(0,0),(2,0),(2,2),(0,2)``
ordering); hole boundaries are negative. Filling tests pixel centres with the
even-odd rule, so tracing and filling invert each other exactly.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, FormatError

# direction -> (dx, dy); y grows downward
_RIGHT_TURN = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ContractError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _boundary_edges(m: np.ndarray) -> dict[tuple[int, int], list[tuple[int, int]]]:
    p = np.pad(m, 1)
    core = p[1:-1, 1:-1]
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(rows, cols, start, d):
        for r, c in zip(rows.tolist(), cols.tolist()):
            out.setdefault((c + start[0], r + start[1]), []).append(d)

    add(*np.nonzero(core & ~p[:-2, 1:-1]), (0, 0), (1, 0))  # top
    add(*np.nonzero(core & ~p[1:-1, 2:]), (1, 0), (0, 1))  # right
    add(*np.nonzero(core & ~p[2:, 1:-1]), (1, 1), (-1, 0))  # bottom
    add(*np.nonzero(core & ~p[1:-1, :-2]), (0, 1), (0, -1))  # left
    return out


def _pick(options: list[tuple[int, int]], heading: tuple[int, int]) -> tuple[int, int]:
    if len(options) == 1:
        return options[0]
    right = _RIGHT_TURN[heading]
    return right if right in options else heading if heading in options else options[0]


def _simplify(pts: list[tuple[int, int]]) -> list[tuple[int, int]]:
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    start = min(range(len(keep)), key=lambda i: (keep[i][1], keep[i][0]))
    return keep[start:] + keep[:start]


def signed_area(polygon) -> float:
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def mask_to_polygon(mask) -> list[list[float]]:
    """Trace every boundary of a binary mask.

    Foreground is 4-connected: diagonally touching pixels end up in separate
    polygons. Outer loops come first, each group ordered by its top-left vertex.
    """
    m = _as_mask(mask)
    if not m.any():
        raise ContractError("mask_to_polygon needs a nonempty mask")
    edges = _boundary_edges(m)
    used: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    loops = []
    for start in sorted(edges, key=lambda v: (v[1], v[0])):
        for d0 in edges[start]:
            if (start, d0) in used:
                continue
            pts = []
            v, d = start, d0
            while True:
                used.add((v, d))
                pts.append(v)
                v = (v[0] + d[0], v[1] + d[1])
                d = _pick(edges[v], d)
                if (v, d) == (start, d0):
                    break
            loops.append(_simplify(pts))
    polys = []
    for pts in loops:
        flat = [float(coord) for xy in pts for coord in xy]
        polys.append((signed_area(flat) < 0, pts[0][1], pts[0][0], flat))
    polys.sort(key=lambda t: t[:3])
    return [p[3] for p in polys]


def polygon_to_mask(polygons, height: int, width: int) -> np.ndarray:
    """Even-odd fill of pixel centres over all polygons together."""
    out = np.zeros((height, width), dtype=bool)
    yc = np.arange(height) + 0.5
    xc = np.arange(width) + 0.5
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64)
        if pts.size < 6 or pts.size % 2:
            raise ContractError(f"degenerate polygon with {pts.size // 2} vertices")
        pts = pts.reshape(-1, 2)
        if pts[:, 0].min() < 0 or pts[:, 0].max() > width or pts[:, 1].min() < 0 or pts[:, 1].max() > height:
            raise ContractError(f"polygon leaves the {width}x{height} image")
        nxt = np.roll(pts, -1, axis=0)
        for (x0, y0), (x1, y1) in zip(pts, nxt):
            if y0 == y1:
                continue
            rows = np.nonzero((y0 > yc) != (y1 > yc))[0]
            if rows.size == 0:
                continue
            xs = x0 + (yc[rows] - y0) * (x1 - x0) / (y1 - y0)
            out[rows] ^= xc[None, :] < xs[:, None]
    return out


def mask_to_rle(mask) -> dict:
    """COCO uncompressed RLE: column-major runs, starting with a zero run."""
    m = _as_mask(mask)
    h, w = m.shape
    if h == 0 or w == 0:
        raise ContractError("mask dimensions must be positive")
    flat = m.flatten(order="F").astype(np.int8)
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def rle_to_mask(rle: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed RLE: {exc}") from exc
    if any(c < 0 for c in counts):
        raise FormatError("negative RLE run length")
    if sum(counts) != h * w:
        raise FormatError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values, counts).astype(bool)
    return flat.reshape((h, w), order="F")


def tight_bbox(mask) -> list[int]:
    """``[x, y, w, h]`` of the smallest rectangle holding every set pixel."""
    m = _as_mask(mask)
    rows = np.nonzero(m.any(axis=1))[0]
    cols = np.nonzero(m.any(axis=0))[0]
    if rows.size == 0:
        raise ContractError("tight_bbox of an empty mask")
    return [int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)]


def decode_segmentation(seg, height: int, width: int) -> np.ndarray:
    """Decode a COCO ``segmentation`` value (polygon list or RLE dict)."""
    if isinstance(seg, dict):
        m = rle_to_mask(seg)
        if m.shape != (height, width):
            raise FormatError(f"RLE size {list(m.shape)} != image {[height, width]}")
        return m
    return polygon_to_mask(seg, height, width)
