"""Synthetic scenes, mask conversions and COCO-style dataset tooling."""

from .coco import (
    CocoDataset,
    ValidationReport,
    build_coco,
    dataset_from_samples,
    canonical_json,
    check_dataset,
    convert_label_maps,
    load_sample,
    split_dataset,
    validate_coco,
    write_label_maps,
)
from .masks import (
    decode_segmentation,
    mask_to_polygon,
    mask_to_rle,
    polygon_to_mask,
    rle_to_mask,
    signed_area,
    tight_bbox,
)
from .scenes import CATEGORIES, SceneConfig, SceneSample, generate_dataset, generate_scene

__all__ = [
    "CATEGORIES",
    "CocoDataset",
    "SceneConfig",
    "SceneSample",
    "ValidationReport",
    "build_coco",
    "dataset_from_samples",
    "canonical_json",
    "check_dataset",
    "convert_label_maps",
    "decode_segmentation",
    "generate_dataset",
    "generate_scene",
    "load_sample",
    "mask_to_polygon",
    "mask_to_rle",
    "polygon_to_mask",
    "rle_to_mask",
    "signed_area",
    "split_dataset",
    "tight_bbox",
    "validate_coco",
    "write_label_maps",
]
