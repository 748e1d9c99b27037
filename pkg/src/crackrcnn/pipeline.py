"""Training, evaluation and inference orchestration.

Everything random is keyed by ``(seed, epoch, ...)`` so a run resumed from
an epoch checkpoint follows exactly the trajectory of an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .augment import Sample, apply
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .dataset import DatasetSplit, dataset_digest, rasterize_mask
from .metrics import ApReport, ConfusionCounts, GroundTruth, coco_ap, confusion, prf_accuracy
from .model import MaskRCNN

__all__ = [
    "NonFiniteLossError",
    "EvalReport",
    "TrainResult",
    "build_model",
    "model_from_checkpoint",
    "to_checkpoint",
    "load_image",
    "load_sample",
    "train",
    "evaluate",
    "predict_images",
    "infer",
    "rle_encode",
    "rle_decode",
    "render_overlay",
]

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
SIZE_DIVISOR = 32
MAX_AUGMENT_RETRIES = 10
MASK_COLOR = np.array([128, 0, 128], dtype=np.float64)  # purple
BOX_COLOR = np.array([0, 200, 0], dtype=np.uint8)  # green


class NonFiniteLossError(RuntimeError):
    def __init__(self, image_ids, losses):
        self.image_ids = list(image_ids)
        self.losses = losses
        super().__init__(f"non-finite loss {losses} on batch with image ids {self.image_ids}")


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(cfg: RunConfig) -> MaskRCNN:
    torch.manual_seed(cfg.seed)
    model = MaskRCNN(cfg.backbone, cfg.heads)
    return model.to(_dtype(cfg))


def to_checkpoint(model, optimizer, epoch: int, cfg: RunConfig, extra=None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    optim = {}
    if optimizer is not None:
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    optim[names[id(p)]] = buf.detach().cpu().numpy().copy()
    return Checkpoint(params, optim, epoch, cfg.digest(), cfg.to_ini(), dict(extra or {}))


def model_from_checkpoint(ckpt: Checkpoint, cfg: Optional[RunConfig] = None):
    if cfg is None:
        cfg = parse_config(ckpt.config_text)
    model = MaskRCNN(cfg.backbone, cfg.heads).to(_dtype(cfg))
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def _make_optimizer(model, cfg: RunConfig):
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _restore_optimizer(optimizer, model, state: Dict[str, np.ndarray]):
    params = dict(model.named_parameters())
    for name, buf in state.items():
        optimizer.state[params[name]]["momentum_buffer"] = torch.from_numpy(np.array(buf))


# -- images -------------------------------------------------------------


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_sample(split: DatasetSplit, image_root, record) -> Sample:
    image = load_image(os.path.join(str(image_root), record.file_path))
    if image.shape[:2] != (record.height, record.width):
        raise ValueError(
            f"image {record.file_path} is {image.shape[1]}x{image.shape[0]}, "
            f"annotation says {record.width}x{record.height}"
        )
    anns = split.annotations_for(record.id)
    masks = np.zeros((len(anns), record.height, record.width), dtype=bool)
    for k, a in enumerate(anns):
        masks[k] = rasterize_mask(a, record.width, record.height)
    boxes = np.array([a.bbox for a in anns], dtype=np.float64).reshape(-1, 4)
    return Sample(image=image, masks=masks, boxes=boxes, scene_level=record.scene_level.value,
                  meta={"image_id": record.id})


def _resize_factor(h, w, max_size) -> float:
    if max_size and max(h, w) > max_size:
        return max_size / max(h, w)
    return 1.0


def _batch(samples: Sequence[Sample], max_size: int, dtype):
    """Resize (if needed), normalise and zero-pad samples into one tensor."""
    scaled, scales = [], []
    for s in samples:
        h, w = s.image.shape[:2]
        f = _resize_factor(h, w, max_size)
        img, masks, boxes = s.image, s.masks, s.boxes
        if f != 1.0:
            nh, nw = max(1, round(h * f)), max(1, round(w * f))
            img = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
            masks = np.stack([np.asarray(Image.fromarray(m).resize((nw, nh), Image.NEAREST)) for m in masks]) \
                if len(masks) else np.zeros((0, nh, nw), bool)
            boxes = boxes * f
        scaled.append((img, masks, boxes))
        scales.append(f)
    H = max(i.shape[0] for i, _, _ in scaled)
    W = max(i.shape[1] for i, _, _ in scaled)
    H = int(math.ceil(H / SIZE_DIVISOR) * SIZE_DIVISOR)
    W = int(math.ceil(W / SIZE_DIVISOR) * SIZE_DIVISOR)
    batch = torch.zeros((len(samples), 3, H, W), dtype=dtype)
    targets = []
    for k, (img, masks, boxes) in enumerate(scaled):
        h, w = img.shape[:2]
        t = torch.from_numpy(img.astype(np.float64) / 255.0).permute(2, 0, 1)
        batch[k, :, :h, :w] = ((t - PIXEL_MEAN) / PIXEL_STD).to(dtype)
        padded = np.zeros((len(masks), H, W), dtype=bool)
        padded[:, :h, :w] = masks
        targets.append({"boxes": torch.as_tensor(boxes, dtype=dtype), "masks": torch.from_numpy(padded)})
    return batch, targets, scales


# -- training -----------------------------------------------------------


@dataclass
class TrainResult:
    last: Checkpoint
    best: Checkpoint
    log: List[dict] = field(default_factory=list)


def _augmented(cfg: RunConfig, sample: Sample, epoch: int, image_id: int) -> Sample:
    rng = cfg.augment.rng(epoch, image_id)
    for _ in range(MAX_AUGMENT_RETRIES):
        out = apply(cfg.augment, sample, rng)
        if not out.empty:
            return out
    return sample


def train(cfg: RunConfig, train_split: DatasetSplit, val_split: Optional[DatasetSplit] = None,
          out_dir=None, train_root=None, val_root=None, resume: Optional[Checkpoint] = None,
          samples: Optional[Dict[int, Sample]] = None) -> TrainResult:
    """SGD with momentum and weight decay over ``cfg.epochs`` epochs.

    ``samples`` may supply pre-decoded training samples keyed by image id
    (otherwise images are read from ``train_root``). With ``out_dir`` set,
    ``last.ckpt``, ``best.ckpt``, ``train_log.jsonl`` and the effective
    config are written there. ``best`` is chosen by validation mask AP, or
    is the last checkpoint when there is no validation split.
    """
    if len(train_split) == 0:
        raise ValueError("training split is empty")
    dtype = _dtype(cfg)
    torch.use_deterministic_algorithms(True)
    model = build_model(cfg)
    optimizer = _make_optimizer(model, cfg)
    start = 0
    best_ap = -1.0
    if resume is not None:
        if resume.config_digest != cfg.digest():
            raise ConfigError(
                f"checkpoint config digest {resume.config_digest} does not match run config {cfg.digest()}"
            )
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in resume.params.items()})
        _restore_optimizer(optimizer, model, resume.optimizer_state)
        start = resume.epoch
        best_ap = resume.extra.get("best_val_ap", -1.0)

    if samples is None:
        samples = {r.id: load_sample(train_split, train_root, r) for r in train_split.records}
    ids = sorted(r.id for r in train_split.records)
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
        with open(os.path.join(out_dir, "effective_config.ini"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_ini())
        if start == 0 and os.path.exists(log_path):
            os.remove(log_path)

    records = []
    best = resume
    last = resume
    weights = cfg.heads.loss_weights
    for epoch in range(start, cfg.epochs):
        t0 = time.time()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ids))
        sums = {}
        n_batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch_ids = [ids[i] for i in order[b0 : b0 + cfg.batch_size]]
            batch = [_augmented(cfg, samples[i], epoch, i) for i in batch_ids]
            images, targets, _ = _batch(batch, cfg.data.max_size, dtype)
            losses = model.losses(images, targets, seed=[cfg.seed, epoch, b0])
            total = losses.total(weights)
            values = losses.as_floats()
            if not math.isfinite(float(total.detach())):
                raise NonFiniteLossError(batch_ids, values)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        entry = {"epoch": epoch + 1, **{k: v / n_batches for k, v in sums.items()}}
        val_ap = None
        if val_split is not None and len(val_split):
            rep = evaluate_model(model, val_split, cfg, image_root=val_root)
            entry["val_box"] = rep.box.as_dict() if rep.box else None
            entry["val_mask"] = rep.mask.as_dict() if rep.mask else None
            val_ap = rep.mask.ap if rep.mask and rep.mask.ap is not None else 0.0
        entry["wall_time"] = round(time.time() - t0, 3)
        records.append(entry)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        improved = val_ap is None or val_ap > best_ap
        if val_ap is not None and improved:
            best_ap = val_ap
        last = to_checkpoint(model, optimizer, epoch + 1, cfg, {"best_val_ap": best_ap})
        if improved:
            best = last
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), last)
            if improved:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), best)
    if last is None:
        last = best = to_checkpoint(model, optimizer, start, cfg, {"best_val_ap": best_ap})
    return TrainResult(last=last, best=best, log=records)


# -- evaluation ---------------------------------------------------------


@dataclass
class EvalReport:
    box: Optional[ApReport]
    mask: Optional[ApReport]
    counts: ConfusionCounts
    rates: dict
    dataset_digest: str
    method: str
    score_threshold: float
    mask_threshold: float
    n_images: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset_digest": self.dataset_digest,
            "n_images": self.n_images,
            "score_threshold": self.score_threshold,
            "mask_threshold": self.mask_threshold,
            "box": self.box.as_dict() if self.box else None,
            "mask": self.mask.as_dict() if self.mask else None,
            "confusion": {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn},
            "rates": self.rates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            box=ApReport(**d["box"]) if d.get("box") else None,
            mask=ApReport(**d["mask"]) if d.get("mask") else None,
            counts=ConfusionCounts(**d["confusion"]),
            rates=d["rates"],
            dataset_digest=d["dataset_digest"],
            method=d["method"],
            score_threshold=d["score_threshold"],
            mask_threshold=d["mask_threshold"],
            n_images=d["n_images"],
        )


METHOD_NAMES = {
    "resnet_fpn": "Mask R-CNN",
    "a_panet": "Mask R-CNN + A-PANet",
    "hrnet": "Mask R-CNN + HRNet",
}


def predict_images(model, images: Sequence[np.ndarray], cfg: RunConfig, batch_size: int = 1):
    """Run the model on raw uint8 RGB arrays; detections in original coordinates."""
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    for b0 in range(0, len(images), batch_size):
        chunk = [Sample(image=img, masks=np.zeros((0, *img.shape[:2]), bool), boxes=np.zeros((0, 4)))
                 for img in images[b0 : b0 + batch_size]]
        batch, _, scales = _batch(chunk, cfg.data.max_size, dtype)
        sizes = [s.image.shape[:2] for s in chunk]
        out.extend(model.predict(batch, cfg.score_threshold, cfg.mask_threshold, out_sizes=sizes, scales=scales))
    return out


def evaluate_model(model, split: DatasetSplit, cfg: RunConfig, image_root=None, samples=None) -> EvalReport:
    records = sorted(split.records, key=lambda r: r.id)
    dets, gts, preds, labels = [], [], {}, {}
    for r in records:
        s = samples[r.id] if samples is not None else load_sample(split, image_root, r)
        d = predict_images(model, [s.image], cfg)[0]
        dets.append(d)
        gts.append([GroundTruth(tuple(b), m) for b, m in zip(s.boxes, s.masks)])
        preds[r.id] = d
        labels[r.id] = len(s.boxes) > 0
    has_gt = sum(len(g) for g in gts) > 0
    counts = confusion(preds, labels, cfg.score_threshold)
    return EvalReport(
        box=coco_ap(dets, gts, "box") if has_gt else None,
        mask=coco_ap(dets, gts, "mask") if has_gt else None,
        counts=counts,
        rates=prf_accuracy(counts),
        dataset_digest=dataset_digest(split),
        method=METHOD_NAMES[cfg.backbone.kind],
        score_threshold=cfg.score_threshold,
        mask_threshold=cfg.mask_threshold,
        n_images=len(records),
    )


def evaluate(checkpoint, split: DatasetSplit, cfg: Optional[RunConfig] = None, image_root=None,
             samples=None) -> EvalReport:
    """Evaluate a checkpoint (object or path) on a labelled split.

    Thresholds come from ``cfg`` when given; the architecture always comes
    from the checkpoint's own stored configuration.
    """
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    model, stored = model_from_checkpoint(ckpt)
    run_cfg = stored if cfg is None else cfg
    return evaluate_model(model, split, run_cfg, image_root=image_root, samples=samples)


# -- inference outputs ----------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, first run counts zeros (possibly 0 of them)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    if pos != h * w:
        raise ValueError(f"run lengths cover {pos} pixels, mask has {h * w}")
    return flat.reshape(h, w)


def detection_record(name: str, image: np.ndarray, dets) -> dict:
    return {
        "image": name,
        "height": int(image.shape[0]),
        "width": int(image.shape[1]),
        "detections": [
            {"box": [round(v, 4) for v in d.box], "score": round(d.score, 6), "label": d.label,
             "mask": rle_encode(d.mask)}
            for d in dets
        ],
    }


def render_overlay(image: np.ndarray, dets, alpha: float = 0.5) -> np.ndarray:
    """Masks blended in purple, boxes outlined in green."""
    out = image.astype(np.float64).copy()
    for d in dets:
        m = np.asarray(d.mask, bool)
        out[m] = (1 - alpha) * out[m] + alpha * MASK_COLOR
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    h, w = out.shape[:2]
    for d in dets:
        x1, y1, x2, y2 = d.box
        c0, c1 = int(np.clip(math.floor(x1), 0, w - 1)), int(np.clip(math.ceil(x2) - 1, 0, w - 1))
        r0, r1 = int(np.clip(math.floor(y1), 0, h - 1)), int(np.clip(math.ceil(y2) - 1, 0, h - 1))
        out[r0, c0 : c1 + 1] = BOX_COLOR
        out[r1, c0 : c1 + 1] = BOX_COLOR
        out[r0 : r1 + 1, c0] = BOX_COLOR
        out[r0 : r1 + 1, c1] = BOX_COLOR
    return out


def infer(checkpoint, image_paths: Sequence, out_dir, cfg: Optional[RunConfig] = None) -> List[str]:
    """Write ``<stem>.json`` and ``<stem>_overlay.png`` per image.

    Returns the paths that could not be read; those are logged and skipped.
    """
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    model, stored = model_from_checkpoint(ckpt)
    run_cfg = stored if cfg is None else cfg
    os.makedirs(out_dir, exist_ok=True)
    failed = []
    for path in image_paths:
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            log.error("cannot read %s: %s", path, exc)
            failed.append(str(path))
            continue
        dets = predict_images(model, [image], run_cfg)[0]
        stem = os.path.splitext(os.path.basename(str(path)))[0]
        with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
            json.dump(detection_record(os.path.basename(str(path)), image, dets), fh, sort_keys=True)
            fh.write("\n")
        Image.fromarray(render_overlay(image, dets)).save(os.path.join(out_dir, f"{stem}_overlay.png"))
    return failed
