"""COCO-style dataset construction, validation and splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError, FormatError, ValidationError
from .imageio import read_netpbm, write_pgm16, write_ppm
from .masks import decode_segmentation, mask_to_polygon, mask_to_rle, tight_bbox
from .scenes import CATEGORIES, SceneSample

RLE_POLYGON_THRESHOLD = 4


def canonical_json(obj) -> str:
    """Sorted keys, compact separators, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


@dataclass
class CocoDataset:
    images: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"images": self.images, "categories": self.categories, "annotations": self.annotations}

    @classmethod
    def from_dict(cls, d: dict) -> "CocoDataset":
        try:
            return cls(list(d["images"]), list(d["categories"]), list(d["annotations"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"not a COCO-style document: missing {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CocoDataset":
        return cls.from_dict(_parse_json(Path(path).read_bytes()))

    def image_by_id(self) -> dict:
        return {img["id"]: img for img in self.images}

    def annotations_by_image(self) -> dict:
        out = {img["id"]: [] for img in self.images}
        for ann in self.annotations:
            out.setdefault(ann["image_id"], []).append(ann)
        return out

    def decode(self, ann: dict) -> np.ndarray:
        img = self.image_by_id()[ann["image_id"]]
        return decode_segmentation(ann["segmentation"], img["height"], img["width"])

    def subset(self, image_ids) -> "CocoDataset":
        keep = set(image_ids)
        return CocoDataset(
            [img for img in self.images if img["id"] in keep],
            list(self.categories),
            [a for a in self.annotations if a["image_id"] in keep],
        )


def _parse_json(raw: bytes):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid UTF-8 at byte offset {exc.start}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(f"JSON parse error at byte offset {offset}: {exc.msg}") from exc


def encode_mask(mask: np.ndarray, rle_threshold: int = RLE_POLYGON_THRESHOLD):
    """Polygons when the mask traces to at most ``rle_threshold`` loops, else RLE."""
    polys = mask_to_polygon(mask)
    if len(polys) > rle_threshold:
        return mask_to_rle(mask)
    return polys


def annotation_for_mask(mask: np.ndarray, ann_id: int, image_id: int, category_id: int,
                        rle_threshold: int = RLE_POLYGON_THRESHOLD) -> dict:
    seg = encode_mask(mask, rle_threshold)
    decoded = decode_segmentation(seg, *mask.shape)
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": int(category_id),
        "segmentation": seg,
        "bbox": tight_bbox(decoded),
        "area": int(decoded.sum()),
        "iscrowd": 0,
    }


def _image_entry(image_id: int, sample: SceneSample) -> dict:
    stem = f"{image_id:06d}"
    return {
        "id": image_id,
        "file_name": f"rgb/{stem}.ppm",
        "depth_file_name": f"depth/{stem}.pgm",
        "height": int(sample.height),
        "width": int(sample.width),
    }


def dataset_from_samples(samples: list[SceneSample], categories=None,
                         rle_threshold: int = RLE_POLYGON_THRESHOLD) -> CocoDataset:
    """In-memory COCO dataset for ``samples`` (no files); instance-free scenes are dropped."""
    ds = CocoDataset(categories=[dict(c) for c in (categories or CATEGORIES)])
    ann_id = 1
    for sample in samples:
        masks = [np.asarray(m, dtype=bool) for m in sample.instance_masks]
        keep = [(m, c) for m, c in zip(masks, sample.categories) if m.any()]
        if not keep:
            continue
        image_id = len(ds.images) + 1
        ds.images.append(_image_entry(image_id, sample))
        for m, c in keep:
            ds.annotations.append(annotation_for_mask(m, ann_id, image_id, c, rle_threshold))
            ann_id += 1
    return ds


def build_coco(samples: list[SceneSample], out_dir, categories=None,
               rle_threshold: int = RLE_POLYGON_THRESHOLD, json_name: str = "annotations.json") -> CocoDataset:
    """Write images and a COCO JSON for ``samples``; scenes without instances are dropped."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    ds = dataset_from_samples(samples, categories, rle_threshold)
    kept = [s for s in samples if any(np.asarray(m, dtype=bool).any() for m in s.instance_masks)]
    for img, sample in zip(ds.images, kept):
        write_ppm(out / img["file_name"], sample.rgb)
        write_pgm16(out / img["depth_file_name"], sample.depth)
    violations = check_dataset(ds)
    if violations:
        raise ValidationError("built dataset violates invariants", violations)
    ds.save(out / json_name)
    return ds


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(self.violations)


def check_dataset(ds: CocoDataset) -> list[str]:
    v: list[str] = []
    for kind, items in (("image", ds.images), ("category", ds.categories), ("annotation", ds.annotations)):
        seen: set = set()
        for it in items:
            if "id" not in it:
                v.append(f"{kind} without id: {it!r:.80}")
            elif it["id"] in seen:
                v.append(f"duplicate {kind} id {it['id']}")
            else:
                seen.add(it["id"])
    images = {img.get("id"): img for img in ds.images}
    cats = {c.get("id") for c in ds.categories}
    counts = {i: 0 for i in images}
    for ann in ds.annotations:
        aid = ann.get("id")
        img = images.get(ann.get("image_id"))
        if img is None:
            v.append(f"annotation {aid}: references missing image {ann.get('image_id')}")
            continue
        counts[img["id"]] += 1
        if ann.get("category_id") not in cats:
            v.append(f"annotation {aid}: references missing category {ann.get('category_id')}")
        h, w = img.get("height"), img.get("width")
        seg = ann.get("segmentation")
        try:
            if isinstance(seg, list):
                for poly in seg:
                    xs, ys = poly[0::2], poly[1::2]
                    if len(poly) < 6 or len(poly) % 2:
                        v.append(f"annotation {aid}: degenerate polygon")
                    elif min(xs) < 0 or max(xs) > w or min(ys) < 0 or max(ys) > h:
                        v.append(f"annotation {aid}: polygon outside image bounds")
            mask = decode_segmentation(seg, h, w)
        except (ContractError, FormatError, TypeError, ValueError) as exc:
            v.append(f"annotation {aid}: undecodable segmentation ({exc})")
            continue
        n = int(mask.sum())
        if n == 0:
            v.append(f"annotation {aid}: empty mask")
            continue
        area = ann.get("area")
        if not isinstance(area, (int, float)) or abs(area - n) > 1:
            v.append(f"annotation {aid}: area {area} differs from mask pixel count {n}")
        box = tight_bbox(mask)
        if [float(x) for x in ann.get("bbox", [])] != [float(x) for x in box]:
            v.append(f"annotation {aid}: bbox {ann.get('bbox')} != tight mask box {box}")
        if ann.get("iscrowd", 0) not in (0, 1):
            v.append(f"annotation {aid}: iscrowd must be 0 or 1")
    for iid, n in counts.items():
        if n == 0:
            v.append(f"image {iid}: has no annotations")
    return v


def validate_coco(path) -> ValidationReport:
    """Check a COCO JSON file on disk against every dataset invariant."""
    doc = _parse_json(Path(path).read_bytes())
    ds = CocoDataset.from_dict(doc)
    return ValidationReport(check_dataset(ds))


def split_dataset(ds: CocoDataset, train_fraction: float, seed: int) -> tuple[dict, dict]:
    """Image-level seeded split; the train side gets ``floor(n * fraction)`` images."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    ids = sorted(img["id"] for img in ds.images)
    n_train = math.floor(len(ids) * train_fraction + 1e-9)
    if n_train == 0 or n_train == len(ids):
        raise ContractError(f"fraction {train_fraction} of {len(ids)} images leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(ids))
    train_ids = sorted(ids[i] for i in order[:n_train])
    val_ids = sorted(ids[i] for i in order[n_train:])

    def manifest(name, image_ids):
        keep = set(image_ids)
        ann_ids = sorted(a["id"] for a in ds.annotations if a["image_id"] in keep)
        return {"split": name, "image_ids": image_ids, "annotation_ids": ann_ids}

    return manifest("train", train_ids), manifest("val", val_ids)


def load_sample(ds: CocoDataset, image: dict, root) -> SceneSample:
    """Read one image's RGB/depth files and decode its masks."""
    root = Path(root)
    rgb = read_netpbm(root / image["file_name"])
    depth = read_netpbm(root / image["depth_file_name"]) if image.get("depth_file_name") else None
    if depth is None:
        depth = np.zeros(rgb.shape[:2], dtype=np.uint16)
    anns = [a for a in ds.annotations if a["image_id"] == image["id"]]
    masks = [decode_segmentation(a["segmentation"], image["height"], image["width"]) for a in anns]
    return SceneSample(rgb, depth, masks, [a["category_id"] for a in anns], meta={"image_id": image["id"]})


def convert_label_maps(src_dir, out_dir, categories=None, rle_threshold: int = RLE_POLYGON_THRESHOLD) -> CocoDataset:
    """Build a COCO dataset from a directory of instance/class label maps.

    Each sample ``NAME`` needs ``NAME.ppm`` (RGB), ``NAME.inst.pgm`` (instance
    index per pixel, 0 = none) and ``NAME.cls.pgm`` (category id per pixel,
    0 = none); ``NAME.depth.pgm`` is optional. An instance is one distinct
    nonzero (class, instance) pair. Images with no instance are dropped.
    """
    src = Path(src_dir)
    samples = []
    for rgb_path in sorted(src.glob("*.ppm")):
        stem = rgb_path.name[: -len(".ppm")]
        inst = read_netpbm(src / f"{stem}.inst.pgm").astype(np.int64)
        cls = read_netpbm(src / f"{stem}.cls.pgm").astype(np.int64)
        rgb = read_netpbm(rgb_path)
        depth_path = src / f"{stem}.depth.pgm"
        depth = read_netpbm(depth_path) if depth_path.exists() else np.zeros(inst.shape, dtype=np.uint16)
        masks, cats = [], []
        valid = (inst > 0) & (cls > 0)
        pairs = sorted(set(zip(cls[valid].tolist(), inst[valid].tolist())), key=lambda p: (p[1], p[0]))
        for c, i in pairs:
            masks.append((cls == c) & (inst == i))
            cats.append(c)
        samples.append(SceneSample(rgb, depth, masks, cats, meta={"source": stem}))
    if categories is None:
        used = sorted({c for s in samples for c in s.categories})
        categories = [{"id": c, "name": f"class_{c}"} for c in used]
    return build_coco(samples, out_dir, categories=categories, rle_threshold=rle_threshold)


def write_label_maps(samples: list[SceneSample], out_dir) -> None:
    """Inverse of :func:`convert_label_maps`'s input layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        stem = f"scene{k:05d}"
        inst = np.zeros(s.rgb.shape[:2], dtype=np.uint16)
        cls = np.zeros_like(inst)
        for i, (m, c) in enumerate(zip(s.instance_masks, s.categories), start=1):
            inst[m] = i
            cls[m] = c
        write_ppm(out / f"{stem}.ppm", s.rgb)
        write_pgm16(out / f"{stem}.depth.pgm", s.depth)
        write_pgm16(out / f"{stem}.inst.pgm", inst)
        write_pgm16(out / f"{stem}.cls.pgm", cls)
