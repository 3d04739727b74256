"""Probes for object coupling and zero-padding positional bias.

Coupling: place two object patches side by side on a black canvas and the
first object alone at the same position on a second canvas; the coupling rate
is the ratio of cosine similarities cos(A-with-B, B) / cos(A-alone, B) read
from one stage's features.  1 means the neighbor leaves A's features alone.

Positional bias: tile one patch into a 3x3 grid and compare the center cell's
stage features against the 8 border cells (mean cosine similarity).  1 means
the network encodes no position; zero-padding pushes it below 1.

Per-stage region features are RoIAlign on the stage map followed by average
pooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .encoder import EncoderParams, forward_backbone, roi_align, STAGE_NAMES
from .errors import InsufficientFixtures, ShapeError, ZeroSimilarity
from .geometry import BBox

MIN_FIXTURE_PAIRS = 20


def probe_box(box: BBox, stride: int) -> BBox:
    """Inset a probe box by half the stage stride per side.

    Standard RoIAlign reads up to half a feature cell beyond the box; near the
    map border those reads clamp, which would register as positional signal
    even for a translation-equivariant network.  Keeping every bilinear sample
    inside the box's own cells removes that artifact.
    """
    dx = min(stride * 0.5, box.width * 0.25)
    dy = min(stride * 0.5, box.height * 0.25)
    return BBox(box.x1 + dx, box.y1 + dy, box.x2 - dx, box.y2 - dy)


def _stage_feature(stage_map: np.ndarray, box: BBox, stride: int,
                   out_size: int = 7, ratio: int = 2) -> np.ndarray:
    pooled = roi_align(stage_map, probe_box(box, stride), out_size, stride, ratio)
    return pooled.mean(axis=(1, 2), dtype=np.float64)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na * nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def make_coupling_images(obj_a: np.ndarray, obj_b: np.ndarray):
    """(both-objects image, A-alone image, A box, B box) on black canvases.

    The two patches must share their (square) size; they are placed adjacent,
    horizontally centered as a pair, with a half-patch margin all around.
    """
    if obj_a.shape != obj_b.shape or obj_a.shape[0] != obj_a.shape[1]:
        raise ShapeError("object patches must be square and equally sized")
    p = obj_a.shape[0]
    side = 3 * p
    img_ab = np.zeros((side, side, 3), dtype=np.float32)
    y0 = p
    img_ab[y0:y0 + p, p // 2:p // 2 + p] = obj_a
    img_ab[y0:y0 + p, p // 2 + p:p // 2 + 2 * p] = obj_b
    img_a = np.zeros_like(img_ab)
    img_a[y0:y0 + p, p // 2:p // 2 + p] = obj_a
    box_a = BBox(p // 2, y0, p // 2 + p, y0 + p)
    box_b = BBox(p // 2 + p, y0, p // 2 + 2 * p, y0 + p)
    return img_ab, img_a, box_a, box_b


def _stage_list(stages) -> list[str]:
    if stages is None:
        return list(STAGE_NAMES)
    out = []
    for s in stages:
        name = s if isinstance(s, str) else f"C{s}"
        if name not in STAGE_NAMES:
            raise ShapeError(f"unknown stage {s!r}")
        out.append(name)
    return out


def coupling_rates(params: EncoderParams, obj_a: np.ndarray, obj_b: np.ndarray,
                   stages=None) -> dict[str, float]:
    """Coupling rate per requested stage for one object pair."""
    stages = _stage_list(stages)
    img_ab, img_a, box_a, box_b = make_coupling_images(obj_a, obj_b)
    maps_ab = forward_backbone(params, img_ab)
    maps_a = forward_backbone(params, img_a)
    out = {}
    for name in stages:
        stride = params.spec.stage_stride(STAGE_NAMES.index(name) + 1)
        f_a1 = _stage_feature(maps_ab[name], box_a, stride)
        f_b = _stage_feature(maps_ab[name], box_b, stride)
        f_a2 = _stage_feature(maps_a[name], box_a, stride)
        denom = _cos(f_a2, f_b)
        if abs(denom) < 1e-8:
            raise ZeroSimilarity(f"stage {name}: baseline cosine is ~0")
        out[name] = _cos(f_a1, f_b) / denom
    return out


def coupling_rate(params: EncoderParams, obj_a: np.ndarray, obj_b: np.ndarray,
                  stage) -> float:
    name = _stage_list([stage])[0]
    return coupling_rates(params, obj_a, obj_b, [name])[name]


def grid_mcs_all(params: EncoderParams, patch: np.ndarray,
                 stages=None) -> dict[str, float]:
    """Mean center-vs-border cosine per stage for one 3x3-tiled patch."""
    stages = _stage_list(stages)
    if patch.ndim != 3 or patch.shape[0] != patch.shape[1]:
        raise ShapeError("patch must be a square (P, P, 3) image")
    p = patch.shape[0]
    tiled = np.tile(patch, (3, 3, 1))
    maps = forward_backbone(params, tiled)
    out = {}
    for name in stages:
        stride = params.spec.stage_stride(STAGE_NAMES.index(name) + 1)
        feats = []
        for i in range(3):
            for j in range(3):
                box = BBox(j * p, i * p, (j + 1) * p, (i + 1) * p)
                feats.append(_stage_feature(maps[name], box, stride))
        center = feats[4]
        sims = [_cos(center, feats[idx]) for idx in range(9) if idx != 4]
        out[name] = float(np.mean(sims))
    return out


def grid_mcs(params: EncoderParams, patch: np.ndarray, stage) -> float:
    name = _stage_list([stage])[0]
    return grid_mcs_all(params, patch, [name])[name]


@dataclass
class DiagnosticsFixtures:
    """Object-pair and tiling-patch inputs for the two probes."""

    pairs: list[tuple[np.ndarray, np.ndarray]]
    patches: list[np.ndarray]

    @classmethod
    def generate(cls, rng: np.random.Generator, n_pairs: int = 24,
                 n_patches: int = 24, patch_size: int = 64,
                 n_classes: int = 8) -> "DiagnosticsFixtures":
        """Seeded synthetic fixtures: pairs use two different classes."""
        pairs = []
        for _ in range(n_pairs):
            ca, cb = rng.choice(n_classes, size=2, replace=False)
            pairs.append((data_mod.render_object(int(ca), patch_size, rng),
                          data_mod.render_object(int(cb), patch_size, rng)))
        patches = [data_mod.render_object(int(rng.integers(n_classes)),
                                          patch_size, rng)
                   for _ in range(n_patches)]
        return cls(pairs, patches)


@dataclass
class DiagnosticsReport:
    """Aggregated per-stage coupling rate and mean cosine similarity."""

    stages: list[str]
    coupling_rate: dict[str, float]
    mcs: dict[str, float]
    num_pairs: int
    num_patches: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"stages": self.stages,
                "coupling_rate": self.coupling_rate,
                "mcs": self.mcs,
                "num_pairs": self.num_pairs,
                "num_patches": self.num_patches,
                "metadata": self.metadata}

    @classmethod
    def from_json(cls, doc: dict) -> "DiagnosticsReport":
        return cls(list(doc["stages"]), dict(doc["coupling_rate"]),
                   dict(doc["mcs"]), int(doc["num_pairs"]),
                   int(doc["num_patches"]), dict(doc.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DiagnosticsReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def probe_report(params: EncoderParams, fixtures: DiagnosticsFixtures,
                 stages=None, metadata: dict | None = None) -> DiagnosticsReport:
    """Run both probes over fixture sets and aggregate per stage.

    Coupling rates aggregate with a geometric mean (ratios compose
    multiplicatively); similarities with an arithmetic mean.
    """
    stages = _stage_list(stages)
    if len(fixtures.pairs) < MIN_FIXTURE_PAIRS:
        raise InsufficientFixtures(
            f"need at least {MIN_FIXTURE_PAIRS} object pairs, "
            f"got {len(fixtures.pairs)}")
    cr_logs = {name: [] for name in stages}
    for obj_a, obj_b in fixtures.pairs:
        rates = coupling_rates(params, obj_a, obj_b, stages)
        for name, value in rates.items():
            cr_logs[name].append(np.log(max(value, 1e-8)))
    mcs_vals = {name: [] for name in stages}
    for patch in fixtures.patches:
        vals = grid_mcs_all(params, patch, stages)
        for name, value in vals.items():
            mcs_vals[name].append(value)
    cr = {n: float(np.exp(np.mean(v))) for n, v in cr_logs.items()}
    mcs = {n: float(np.mean(v)) for n, v in mcs_vals.items()}
    return DiagnosticsReport(stages, cr, mcs, len(fixtures.pairs),
                             len(fixtures.patches), metadata or {})
