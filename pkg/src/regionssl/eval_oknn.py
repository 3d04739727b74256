"""Object-level k-nearest-neighbor evaluation over ground-truth boxes.

Features come from the deepest stage map: forward to C5, RoIAlign the box at
7x7, average-pool, unit-normalize -- no projector, so the probe reads the raw
backbone representation.  A feature bank caps the number of stored objects
per image to keep class counts balanced; queries vote with cosine-weighted
sums over their k nearest bank entries.

The disturbed variant replaces every pixel outside the union of ground-truth
boxes with an unrelated image before extraction, quantifying how much the
representation leans on background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import build_foreground_mask
from .data import Dataset
from .encoder import EncoderParams, forward_backbone, roi_align
from .errors import (ConfigError, DegenerateBox, EmptyBank, EmptyDataset,
                     ShapeMismatch)
from .geometry import BBox


@dataclass(frozen=True)
class OKNNConfig:
    k: int = 20
    n_per_image: int = 4
    tie_rule: str = "smallest-id"

    def __post_init__(self):
        if self.k < 1 or self.n_per_image < 1:
            raise ConfigError("k and n_per_image must be >= 1")
        if self.tie_rule != "smallest-id":
            raise ConfigError(f"unknown tie rule {self.tie_rule!r}")


@dataclass
class FeatureBank:
    """Unit-norm object features with their class labels."""

    features: np.ndarray    # (n, d)
    labels: np.ndarray      # (n,)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ShapeMismatch("features and labels must align")

    def __len__(self) -> int:
        return len(self.labels)


def extract_object_feature(params: EncoderParams, image: np.ndarray,
                           gt_box: BBox) -> np.ndarray:
    """Unit-norm C5 RoI feature of one ground-truth box."""
    if gt_box.width <= 0 or gt_box.height <= 0:
        raise DegenerateBox(f"cannot extract a feature for {gt_box}")
    spec = params.spec
    c5 = forward_backbone(params, image)["C5"]
    pooled = roi_align(c5, gt_box, spec.roi_size, spec.stage_stride(5),
                       spec.sampling_ratio)
    v = pooled.mean(axis=(1, 2), dtype=np.float64)
    norm = max(float(np.linalg.norm(v)), 1e-12)
    return (v / norm).astype(np.float32)


def _image_features(params: EncoderParams, image: np.ndarray,
                    boxes: list[BBox]) -> np.ndarray:
    """Features for several boxes of one image with a single trunk pass."""
    spec = params.spec
    c5 = forward_backbone(params, image)["C5"]
    feats = []
    for box in boxes:
        pooled = roi_align(c5, box, spec.roi_size, spec.stage_stride(5),
                           spec.sampling_ratio)
        v = pooled.mean(axis=(1, 2), dtype=np.float64)
        feats.append(v / max(float(np.linalg.norm(v)), 1e-12))
    return np.asarray(feats, dtype=np.float32)


def build_feature_bank(params: EncoderParams, dataset: Dataset,
                       cfg: OKNNConfig | None = None,
                       rng: np.random.Generator | None = None) -> FeatureBank:
    """At most ``cfg.n_per_image`` object features per image, with labels."""
    cfg = cfg or OKNNConfig()
    rng = rng or np.random.default_rng(0)
    if len(dataset) == 0:
        raise EmptyDataset("cannot build a feature bank from zero images")
    feats, labels = [], []
    for im in dataset.images:
        objects = im.objects
        if len(objects) > cfg.n_per_image:
            keep = sorted(rng.choice(len(objects), cfg.n_per_image,
                                     replace=False).tolist())
            objects = [objects[i] for i in keep]
        if not objects:
            continue
        boxes = [b for b, _ in objects]
        feats.append(_image_features(params, im.image, boxes))
        labels.extend(cls for _, cls in objects)
    if not feats:
        return FeatureBank(np.zeros((0, 0), np.float32), np.zeros(0, np.int64))
    return FeatureBank(np.concatenate(feats, axis=0),
                       np.asarray(labels, dtype=np.int64))


def oknn_classify(query: np.ndarray, bank: FeatureBank,
                  k: int) -> tuple[int, list[int]]:
    """(top-1 label, top-5 labels) by cosine-weighted neighbor voting.

    Class scores are sums of neighbor similarities; score ties break toward
    the smaller class id.
    """
    if len(bank) == 0:
        raise EmptyBank("feature bank holds no entries")
    k = min(k, len(bank))
    sims = bank.features @ np.asarray(query, dtype=bank.features.dtype)
    nearest = np.argsort(-sims, kind="stable")[:k]
    classes = np.unique(bank.labels)
    scores = np.zeros(classes.max() + 1, dtype=np.float64)
    for idx in nearest:
        scores[bank.labels[idx]] += float(sims[idx])
    present = np.zeros_like(scores, dtype=bool)
    present[bank.labels[nearest]] = True
    order = sorted(np.flatnonzero(present), key=lambda c: (-scores[c], c))
    ranked = [int(c) for c in order]
    top5 = ranked[:5]
    return ranked[0], top5


def disturbed_extract(params: EncoderParams, image: np.ndarray,
                      gt_boxes: list[BBox], noise_image: np.ndarray,
                      target_box: BBox) -> np.ndarray:
    """Replace everything outside the ground-truth boxes, then extract."""
    if noise_image.shape != image.shape:
        raise ShapeMismatch("noise image must match the image shape")
    h, w = image.shape[:2]
    fg = build_foreground_mask(gt_boxes, w, h).astype(bool)
    disturbed = np.where(fg[:, :, None], image, noise_image)
    return extract_object_feature(params, disturbed, target_box)


def oknn_score(params: EncoderParams, train_set: Dataset, eval_set: Dataset,
               cfg: OKNNConfig | None = None, disturbed: bool = False,
               rng: np.random.Generator | None = None) -> dict:
    """Top-1 / top-5 accuracy of object labels over an evaluation set."""
    cfg = cfg or OKNNConfig()
    rng = rng or np.random.default_rng(0)
    bank = build_feature_bank(params, train_set, cfg, rng)
    if len(bank) == 0:
        raise EmptyBank("training set produced no object features")
    if len(eval_set) == 0:
        raise EmptyDataset("evaluation set holds no images")
    top1 = top5 = count = 0
    for i, im in enumerate(eval_set.images):
        if not im.objects:
            continue
        gt_boxes = [b for b, _ in im.objects]
        noise = None
        if disturbed:
            choices = [j for j in range(len(eval_set.images)) if j != i]
            j = int(rng.choice(choices)) if choices else i
            noise = eval_set.images[j].image
            if noise.shape != im.image.shape:
                noise = np.resize(noise, im.image.shape)
        for box, label in im.objects:
            if disturbed:
                q = disturbed_extract(params, im.image, gt_boxes, noise, box)
            else:
                q = extract_object_feature(params, im.image, box)
            pred1, pred5 = oknn_classify(q, bank, cfg.k)
            top1 += int(pred1 == label)
            top5 += int(label in pred5)
            count += 1
    if count == 0:
        raise EmptyDataset("evaluation set holds no labeled objects")
    return {"top1": top1 / count, "top5": top5 / count, "count": count,
            "k": cfg.k, "n_per_image": cfg.n_per_image,
            "disturbed": bool(disturbed)}
