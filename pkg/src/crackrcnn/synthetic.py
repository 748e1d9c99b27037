"""Synthetic crack images with exact polygon labels.

Cracks are dark, slightly bent strips on a mottled light surface. They are
used for the overfit sanity run, the demos and the CLI tests; no real data
ships with the package.
"""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .dataset import parse_coco, rasterize_polygon

__all__ = ["crack_polygon", "make_image", "make_dataset", "write_dataset"]


def crack_polygon(rng: np.random.Generator, size: int, min_len=0.4, max_len=0.7, width=(4.0, 7.0)):
    """Two-segment strip inside a ``size x size`` canvas, as a closed ring."""
    margin = 3.0
    for _ in range(100):
        length = rng.uniform(min_len, max_len) * size
        theta = rng.uniform(0, np.pi)
        bend = rng.uniform(-0.5, 0.5)
        half_w = rng.uniform(*width) / 2
        c = rng.uniform(0.3 * size, 0.7 * size, size=2)
        d1 = np.array([np.cos(theta), np.sin(theta)])
        d2 = np.array([np.cos(theta + bend), np.sin(theta + bend)])
        spine = np.array([c - d1 * length / 2, c, c + d2 * length / 2])
        normals = []
        for a, b in ((spine[0], spine[1]), (spine[1], spine[2])):
            t = (b - a) / np.linalg.norm(b - a)
            normals.append(np.array([-t[1], t[0]]))
        n_mid = normals[0] + normals[1]
        n_mid /= np.linalg.norm(n_mid)
        offs = [normals[0] * half_w, n_mid * half_w, normals[1] * half_w]
        left = [p + o for p, o in zip(spine, offs)]
        right = [p - o for p, o in zip(spine, offs)]
        ring = np.array(left + right[::-1])
        if ring.min() >= margin and ring.max() <= size - margin:
            return [tuple(float(round(v, 2)) for v in pt) for pt in ring]
    raise RuntimeError("could not place a crack inside the canvas")


def make_image(rng: np.random.Generator, size: int = 64, n_cracks: int = 1):
    """Return ``(image uint8 HxWx3, list of rings)``."""
    base = rng.uniform(150, 210)
    noise = rng.normal(0, 8, size=(size // 8, size // 8))
    texture = np.kron(noise, np.ones((8, 8)))[:size, :size]
    img = base + texture + rng.normal(0, 4, size=(size, size))
    rings = []
    for _ in range(n_cracks):
        ring = crack_polygon(rng, size)
        m = rasterize_polygon(ring, size, size)
        img[m] = rng.uniform(30, 70) + rng.normal(0, 5, size=int(m.sum()))
        rings.append(ring)
    tint = np.array([1.0, 0.97, 0.92])
    rgb = np.clip(img[:, :, None] * tint, 0, 255).astype(np.uint8)
    return rgb, rings


def make_dataset(n_images: int, seed: int = 0, size: int = 64, max_cracks: int = 2, negatives: int = 0):
    """Build images and a COCO document in memory.

    The last ``negatives`` images carry no cracks.
    """
    rng = np.random.default_rng(seed)
    images, doc = [], {"images": [], "annotations": [], "categories": [{"id": 1, "name": "crack"}]}
    ann_id = 1
    for i in range(n_images):
        k = 0 if i >= n_images - negatives else int(rng.integers(1, max_cracks + 1))
        img, rings = make_image(rng, size, k)
        images.append(img)
        image_id = i + 1
        doc["images"].append(
            {"id": image_id, "file_name": f"img_{image_id:04d}.png", "width": size, "height": size,
             "scene_level": "pixel"}
        )
        for ring in rings:
            pts = np.array(ring)
            x1, y1 = pts.min(axis=0)
            x2, y2 = pts.max(axis=0)
            area = int(rasterize_polygon(ring, size, size).sum())
            doc["annotations"].append(
                {"id": ann_id, "image_id": image_id, "category_id": 1,
                 "segmentation": [[c for xy in ring for c in xy]],
                 "bbox": [float(x1), float(y1), float(x2 - x1), float(y2 - y1)],
                 "area": area, "iscrowd": 0}
            )
            ann_id += 1
    return images, doc


def write_dataset(out_dir, n_images: int, seed: int = 0, size: int = 64, max_cracks: int = 2, negatives: int = 0):
    """Write PNGs plus ``annotations.json`` and return the parsed split."""
    os.makedirs(out_dir, exist_ok=True)
    images, doc = make_dataset(n_images, seed, size, max_cracks, negatives)
    for entry, img in zip(doc["images"], images):
        Image.fromarray(img).save(os.path.join(out_dir, entry["file_name"]))
    with open(os.path.join(out_dir, "annotations.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return parse_coco(doc)
