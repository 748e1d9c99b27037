"""COCO-style crack annotations: loading, validation, rasterization and splits.

Boxes are stored internally as ``(x1, y1, x2, y2)`` in continuous pixel
coordinates. COCO's ``[x, y, w, h]`` only exists at the file boundary.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SceneLevel",
    "ImageRecord",
    "InstanceAnnotation",
    "DatasetSplit",
    "DatasetError",
    "AnnotationParseError",
    "AnnotationValidationError",
    "MissingImagesError",
    "load_coco",
    "parse_coco",
    "to_coco",
    "save_coco",
    "rasterize_polygon",
    "rasterize_mask",
    "split_dataset",
    "dataset_digest",
]

CATEGORY_NAME = "crack"
SCENE_LEVEL_KEY = "scene_level"
BBOX_TOLERANCE = 0.5


class SceneLevel(str, enum.Enum):
    PIXEL = "pixel"
    OBJECT = "object"
    STRUCTURAL = "structural"
    UNKNOWN = "unknown"


class DatasetError(ValueError):
    """Base class for every annotation problem raised by this module."""


class AnnotationParseError(DatasetError):
    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: parse error at byte {offset}: {reason}")


class AnnotationValidationError(DatasetError):
    def __init__(self, annotation_id, reason: str, image_id=None):
        self.annotation_id = annotation_id
        self.image_id = image_id
        self.reason = reason
        if annotation_id is None:
            where = f"image {image_id}"
        else:
            where = f"annotation {annotation_id}"
        super().__init__(f"{where}: {reason}")


class MissingImagesError(DatasetError):
    def __init__(self, paths: Sequence[str]):
        self.paths = list(paths)
        listing = "\n  ".join(self.paths)
        super().__init__(f"{len(self.paths)} image file(s) missing:\n  {listing}")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_path: str
    width: int
    height: int
    scene_level: SceneLevel = SceneLevel.UNKNOWN

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise AnnotationValidationError(
                None, f"image size {self.width}x{self.height} must be positive", self.id
            )


@dataclass(frozen=True)
class InstanceAnnotation:
    """One crack instance.

    ``polygons`` holds one or more closed rings; the instance is their
    even-odd union. Almost every annotation tool emits a single ring.
    """

    id: int
    image_id: int
    polygons: tuple
    bbox: tuple
    area: float
    category: str = CATEGORY_NAME

    @property
    def polygon(self):
        return self.polygons[0]


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    records: tuple
    annotations: Mapping = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise AnnotationValidationError(None, f"duplicate image ids {dup}", dup[0])
        known = set(ids)
        for image_id, anns in self.annotations.items():
            if image_id not in known:
                bad = anns[0].id if anns else None
                raise AnnotationValidationError(
                    bad, f"image_id {image_id} does not resolve in split {self.name!r}", image_id
                )
        object.__setattr__(self, "records", tuple(self.records))
        frozen = {k: tuple(v) for k, v in self.annotations.items()}
        object.__setattr__(self, "annotations", MappingProxyType(frozen))

    def __len__(self):
        return len(self.records)

    def annotations_for(self, image_id: int) -> tuple:
        return self.annotations.get(image_id, ())

    def record(self, image_id: int) -> ImageRecord:
        for r in self.records:
            if r.id == image_id:
                return r
        raise KeyError(image_id)


def rasterize_polygon(polygon, width: int, height: int) -> np.ndarray:
    """Pixel-center even-odd fill of one ring on a ``height x width`` grid."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    # only pixel centers inside the ring's bounds can be set
    c0 = max(int(math.floor(pts[:, 0].min() - 0.5)), 0)
    c1 = min(int(math.ceil(pts[:, 0].max() - 0.5)), width - 1)
    r0 = max(int(math.floor(pts[:, 1].min() - 0.5)), 0)
    r1 = min(int(math.ceil(pts[:, 1].max() - 0.5)), height - 1)
    if c1 < c0 or r1 < r0:
        return mask
    px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] + 0.5
    inside = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
    xs, ys = pts[:, 0], pts[:, 1]
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    for xa, ya, xb, yb in zip(xs, ys, xj, yj):
        if ya == yb:
            continue
        straddles = (ya > py) != (yb > py)
        x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= straddles & (px < x_cross)
    mask[r0 : r1 + 1, c0 : c1 + 1] = inside
    return mask


def rasterize_mask(ann: InstanceAnnotation, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for ring in ann.polygons:
        mask ^= rasterize_polygon(ring, width, height)
    if not mask.any():
        raise AnnotationValidationError(ann.id, "polygon rasterizes to zero area", ann.image_id)
    return mask


def _shoelace(ring) -> float:
    pts = np.asarray(ring, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ring_from_flat(flat, ann_id, image_id):
    if not isinstance(flat, list) or len(flat) % 2 or len(flat) < 6:
        raise AnnotationValidationError(
            ann_id, "segmentation ring needs an even number (>= 6) of coordinates", image_id
        )
    try:
        vals = [float(v) for v in flat]
    except (TypeError, ValueError):
        raise AnnotationValidationError(ann_id, "non-numeric polygon coordinate", image_id) from None
    if not all(math.isfinite(v) for v in vals):
        raise AnnotationValidationError(ann_id, "non-finite polygon coordinate", image_id)
    return tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))


def _validate_annotation(ann: InstanceAnnotation, rec: ImageRecord) -> None:
    x1, y1, x2, y2 = ann.bbox
    if not (0 <= x1 < x2 <= rec.width and 0 <= y1 < y2 <= rec.height):
        raise AnnotationValidationError(
            ann.id,
            f"bbox {ann.bbox} outside image {rec.id} bounds {rec.width}x{rec.height}",
            ann.image_id,
        )
    pts = np.concatenate([np.asarray(r, dtype=np.float64) for r in ann.polygons])
    tight = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    if max(abs(a - b) for a, b in zip(tight, ann.bbox)) > BBOX_TOLERANCE:
        raise AnnotationValidationError(
            ann.id, f"bbox {ann.bbox} disagrees with polygon bounds {tight}", ann.image_id
        )
    rasterize_mask(ann, rec.width, rec.height)


def _parse_images(doc) -> list:
    records = []
    for entry in doc.get("images", []):
        image_id = entry.get("id") if isinstance(entry, dict) else None
        try:
            level = SceneLevel(entry.get(SCENE_LEVEL_KEY, SceneLevel.UNKNOWN.value))
            rec = ImageRecord(
                id=int(entry["id"]),
                file_path=str(entry["file_name"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
                scene_level=level,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AnnotationValidationError):
                raise
            raise AnnotationValidationError(None, f"malformed image entry: {exc!r}", image_id) from None
        records.append(rec)
    return records


def _parse_annotations(doc, by_id) -> dict:
    categories = doc.get("categories", [])
    cat_ids = {c.get("id") for c in categories if c.get("name") == CATEGORY_NAME}
    if len(categories) != 1 or not cat_ids:
        raise AnnotationValidationError(None, "expected exactly one category named 'crack'")
    index: dict = {}
    seen = set()
    for entry in doc.get("annotations", []):
        ann_id = entry.get("id")
        image_id = entry.get("image_id")
        if ann_id in seen:
            raise AnnotationValidationError(ann_id, "duplicate annotation id", image_id)
        seen.add(ann_id)
        if entry.get("iscrowd", 0):
            raise AnnotationValidationError(ann_id, "crowd annotations are not supported", image_id)
        if entry.get("category_id") not in cat_ids:
            raise AnnotationValidationError(ann_id, f"unknown category_id {entry.get('category_id')}", image_id)
        if image_id not in by_id:
            raise AnnotationValidationError(ann_id, f"image_id {image_id} not among images", image_id)
        seg = entry.get("segmentation")
        if not isinstance(seg, list) or not seg:
            raise AnnotationValidationError(ann_id, "segmentation must be a list of polygons", image_id)
        rings = tuple(_ring_from_flat(r, ann_id, image_id) for r in seg)
        try:
            x, y, w, h = (float(v) for v in entry["bbox"])
        except (KeyError, TypeError, ValueError):
            raise AnnotationValidationError(ann_id, "bbox must be [x, y, w, h]", image_id) from None
        area = entry.get("area")
        area = float(area) if area is not None else sum(_shoelace(r) for r in rings)
        ann = InstanceAnnotation(
            id=int(ann_id), image_id=int(image_id), polygons=rings, bbox=(x, y, x + w, y + h), area=area
        )
        _validate_annotation(ann, by_id[ann.image_id])
        index.setdefault(ann.image_id, []).append(ann)
    return index


def parse_coco(doc: dict, name: str = "train") -> DatasetSplit:
    """Validate an already-decoded COCO document."""
    if not isinstance(doc, dict):
        raise AnnotationValidationError(None, "top level must be a JSON object")
    records = _parse_images(doc)
    by_id = {}
    for rec in records:
        if rec.id in by_id:
            raise AnnotationValidationError(None, "duplicate image id", rec.id)
        by_id[rec.id] = rec
    index = _parse_annotations(doc, by_id)
    return DatasetSplit(name=name, records=tuple(records), annotations=index)


def load_coco(annotation_file, image_root=None, name: str = "train") -> DatasetSplit:
    """Load and validate a COCO annotation file.

    Images are only checked for existence under ``image_root``; nothing is
    decoded. Pass ``image_root=None`` to skip the existence check.
    """
    raw = open(annotation_file, "rb").read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationParseError(annotation_file, exc.start, "invalid UTF-8") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise AnnotationParseError(annotation_file, offset, exc.msg) from None
    split = parse_coco(doc, name=name)
    if image_root is not None:
        missing = [
            os.path.join(str(image_root), r.file_path)
            for r in split.records
            if not os.path.isfile(os.path.join(str(image_root), r.file_path))
        ]
        if missing:
            raise MissingImagesError(missing)
    return split


def to_coco(split: DatasetSplit) -> dict:
    images = []
    for r in split.records:
        entry = {"id": r.id, "file_name": r.file_path, "width": r.width, "height": r.height}
        if r.scene_level is not SceneLevel.UNKNOWN:
            entry[SCENE_LEVEL_KEY] = r.scene_level.value
        images.append(entry)
    annotations = []
    for r in split.records:
        for a in split.annotations_for(r.id):
            x1, y1, x2, y2 = a.bbox
            annotations.append(
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": 1,
                    "segmentation": [[c for xy in ring for c in xy] for ring in a.polygons],
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": a.area,
                    "iscrowd": 0,
                }
            )
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": CATEGORY_NAME}],
    }


def save_coco(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_coco(split), fh, indent=1)


def dataset_digest(split: DatasetSplit) -> str:
    """Content hash used to refuse comparisons across different data.

    Independent of the split name and of record order.
    """
    doc = to_coco(split)
    doc["images"].sort(key=lambda e: e["id"])
    doc["annotations"].sort(key=lambda e: e["id"])
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def split_dataset(
    records: Iterable[ImageRecord],
    annotations: Mapping,
    fractions=(0.8, 0.1),
    seed: int = 0,
):
    """Deterministic train/val/test partition by image id.

    Sizes are ``floor(n * f)`` for train and val (at least one image each);
    test takes the remainder and is only requested when the fractions sum
    below one.
    """
    records = sorted(records, key=lambda r: r.id)
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0:
        raise ValueError(f"fractions must be positive, got {fractions}")
    if f_train + f_val > 1 + 1e-12:
        raise ValueError(f"fractions {fractions} sum to more than 1")
    want_test = f_train + f_val < 1 - 1e-12
    n = len(records)
    n_splits = 3 if want_test else 2
    if n < n_splits:
        raise ValueError(f"{n} records cannot fill {n_splits} splits")
    n_train = max(1, int(math.floor(n * f_train + 1e-9)))
    n_val = max(1, int(math.floor(n * f_val + 1e-9)))
    if not want_test:
        n_train = n - n_val
    while n_train + n_val > n - (1 if want_test else 0):
        n_train -= 1
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        recs = tuple(records[i] for i in sorted(idx))
        index = {r.id: annotations[r.id] for r in recs if r.id in annotations}
        out.append(DatasetSplit(name=name, records=recs, annotations=index))
    return tuple(out)
