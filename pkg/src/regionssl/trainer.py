"""End-to-end training step and pretraining loop.

One step, per image: build the three views; cut/mask the first and the
downsampled view; extract student features for both and teacher features for
the masked first view and the raw crop view; draw one shared integral shift,
build the foreground mask and its shifted, cutout-processed twin; composite
the shifted foreground onto a donor image from the batch; extract the student
feature of each shifted box; average the per-box loss sums; one SGD update on
the student, an EMA update of the teacher, then enqueue the step's teacher
features into the negatives bank.

All randomness is drawn from generators keyed by (seed, epoch, position, op),
so runs are reproducible and ablations that skip an op leave every other
stream untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .augment import (AugConfig, build_foreground_mask, compose, make_views,
                      prc, prm, prm_expand_boxes, rbj, resize_image, VIEW_SIZE)
from .data import Dataset, GridSpec, resolve_proposals
from .encoder import (BackboneSpec, EncoderPair, EncoderParams, head_backward,
                      head_forward, init_pair, load_checkpoint,
                      momentum_update, roi_align, save_checkpoint,
                      trunk_backward, trunk_forward, zero_grads)
from .errors import ConfigError, DataError, NoSurvivingProposals
from .geometry import BBox, sample_shared_shift
from .loss import (LossConfig, MemoryBank, bank_update, info_nce_with_grads,
                   total_loss)

# rng stream ids, one per randomized pipeline op
_OPS = ("views", "select", "prc1", "prm1", "prc2", "prm2", "rbj", "shift",
        "mask_cut", "donor")
_EPOCH_SHUFFLE = 10 ** 6
_INIT_KEY = (0, 0, 10 ** 6 + 1)
_PREFILL_KEY = (0, 0, 10 ** 6 + 2)


def prefill_bank(bank: MemoryBank, rng: np.random.Generator) -> None:
    """Fill a fresh bank with random unit vectors so step 0 has negatives."""
    if bank.capacity == 0:
        return
    vecs = rng.standard_normal((bank.capacity, bank.dim)).astype(np.float32)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    bank.extend(vecs)


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=tuple(key)))


def image_rngs(seed: int, epoch: int, position: int) -> dict[str, np.random.Generator]:
    """Independent generators for every randomized op of one image instance."""
    return {name: keyed_rng(seed, epoch, position, code)
            for code, name in enumerate(_OPS)}


@dataclass
class TrainConfig:
    """Everything a pretraining run needs; deterministic given the seed."""

    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 0.03
    lr_schedule: str = "cosine"          # or "constant"
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    proposals_per_image: int = 4         # K
    seed: int = 0
    momentum_coefficient: float = 0.99
    use_depositioning: bool = True       # off = surround-robust loss only
    use_rbj: bool = True
    deterministic: bool = False
    checkpoint_every: int = 0            # epochs between checkpoints; 0 = final only
    aug: AugConfig = field(default_factory=AugConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.proposals_per_image < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, K >= 1 required")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def learning_rate(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant" or total_steps <= 0:
            return self.base_lr
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

    def to_jsonable(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        blob = json.dumps(self.to_jsonable(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from flat keys; nested fields use 'aug.', 'loss.', 'backbone.'."""
        top: dict = {}
        nested: dict[str, dict] = {"aug": {}, "loss": {}, "backbone": {}}
        valid = {f for f in cls.__dataclass_fields__}
        for key, value in mapping.items():
            scope, _, name = key.partition(".")
            if name and scope in nested:
                nested[scope][name] = value
            elif key in valid:
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        for scope, klass in (("aug", AugConfig), ("loss", LossConfig),
                             ("backbone", BackboneSpec)):
            if nested[scope]:
                kw = {k: tuple(v) if isinstance(v, list) else v
                      for k, v in nested[scope].items()}
                unknown = set(kw) - set(klass.__dataclass_fields__)
                if unknown:
                    raise ConfigError(f"unknown {scope} keys: {sorted(unknown)}")
                top[scope] = klass(**kw)
        return cls(**top)


class SGD:
    """Momentum SGD with classic weight decay and global-norm grad clipping.

    Clipping matters here: zero-variance positions in the normalized stages
    have a bounded but large backward gain, and a single unclipped step can
    destroy the feature geometry beyond recovery.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4,
                 clip_norm: float = 10.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        scale = 1.0
        if self.clip_norm:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        new = {}
        for key, w in weights.items():
            g = grads[key] * np.asarray(scale, w.dtype) \
                + np.asarray(self.weight_decay, w.dtype) * w
            v = self.velocity.get(key)
            v = g if v is None else np.asarray(self.momentum, w.dtype) * v + g
            self.velocity[key] = v
            new[key] = w - np.asarray(lr, w.dtype) * v
        return new

    def state(self) -> dict[str, np.ndarray]:
        return {f"vel.{k}": v.copy() for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = {k[len("vel."):]: v.copy() for k, v in state.items()
                         if k.startswith("vel.")}


# ---------------------------------------------------------------------------
# one image through the pipeline
# ---------------------------------------------------------------------------

@dataclass
class _ViewTape:
    trunk_caches: list
    c4: np.ndarray
    head_caches: list
    boxes: list[BBox]
    d_c4: np.ndarray


def _student_view(params: EncoderParams, image: np.ndarray,
                  boxes: list[BBox]) -> tuple[list[np.ndarray], _ViewTape]:
    spec = params.spec
    outs, caches = trunk_forward(params, image, 4, want_cache=True)
    c4 = outs[-1]
    feats, head_caches = [], []
    for b in boxes:
        pooled = roi_align(c4, b, spec.roi_size, spec.stage_stride(4),
                           spec.sampling_ratio)
        z, hc = head_forward(params, pooled, want_cache=True)
        feats.append(z)
        head_caches.append(hc)
    return feats, _ViewTape(caches, c4, head_caches, boxes,
                            np.zeros_like(c4))


def _student_view_backward(params: EncoderParams, tape: _ViewTape,
                           dzs: list[np.ndarray],
                           grads: dict[str, np.ndarray]) -> None:
    spec = params.spec
    scale = 1.0 / spec.stage_stride(4)
    for box, hc, dz in zip(tape.boxes, tape.head_caches, dzs):
        d_pooled = head_backward(params, hc, dz.astype(tape.c4.dtype), grads)
        tape.d_c4 += kernels.roi_align_backward(
            d_pooled, box.as_tuple(), tape.c4.shape, scale, spec.sampling_ratio)
    trunk_backward(params, tape.trunk_caches, tape.d_c4, grads)


def _teacher_features(params: EncoderParams, image: np.ndarray,
                      boxes: list[BBox]) -> list[np.ndarray]:
    spec = params.spec
    outs, _ = trunk_forward(params, image, 4)
    c4 = outs[-1]
    feats = []
    for b in boxes:
        pooled = roi_align(c4, b, spec.roi_size, spec.stage_stride(4),
                           spec.sampling_ratio)
        z, _ = head_forward(params, pooled)
        feats.append(z)
    return feats


def _select_boxes(n_surviving: int, k: int, rng: np.random.Generator) -> list[int]:
    """Pick exactly k proposal indices; pad by cycling when fewer survive."""
    if n_surviving >= k:
        return [int(i) for i in rng.choice(n_surviving, size=k, replace=False)]
    return [i % n_surviving for i in range(k)]


def _jitter_route(boxes: list[BBox], rng, cfg: TrainConfig) -> list[BBox]:
    if not cfg.use_rbj:
        return boxes
    return [rbj(b, rng, cfg.aug) for b in boxes]


def process_image(student: EncoderParams, teacher: EncoderParams,
                  image: np.ndarray, proposals: list[BBox],
                  negatives: np.ndarray, cfg: TrainConfig,
                  rngs: dict[str, np.random.Generator],
                  donor_image: np.ndarray, grads: dict[str, np.ndarray]):
    """Full per-image pipeline; accumulates (1/K)-scaled student gradients.

    Returns (per-box surround losses, per-box position losses, teacher
    features to enqueue).  Raises NoSurvivingProposals when the crop drops
    every box.
    """
    tau = cfg.loss.temperature
    k = cfg.proposals_per_image
    views = make_views(image, proposals, rngs["views"], cfg.aug)
    idx = _select_boxes(len(views.boxes_v2), k, rngs["select"])
    b1 = [views.boxes_v1[i] for i in idx]
    b2 = [views.boxes_v2[i] for i in idx]
    b2s = [views.boxes_v2s[i] for i in idx]

    x1_hat, _ = prc(views.x1, b1, rngs["prc1"], cfg.aug)
    x2s_hat, _ = prc(views.x2s, b2s, rngs["prc2"], cfg.aug)
    if cfg.aug.prm_mode == "paste":
        x1_hat, _ = prm(x1_hat, b1, rngs["prm1"], cfg.aug)
        x2s_hat, _ = prm(x2s_hat, b2s, rngs["prm2"], cfg.aug)
        roi1, roi2s = b1, b2s
    else:
        size = x1_hat.shape[0]
        roi1 = prm_expand_boxes(b1, rngs["prm1"], cfg.aug, size, size)
        size_s = x2s_hat.shape[0]
        roi2s = prm_expand_boxes(b2s, rngs["prm2"], cfg.aug, size_s, size_s)

    # One independent jitter per (view, box) route, in a fixed route order.
    roi1 = _jitter_route(roi1, rngs["rbj"], cfg)
    roi2s = _jitter_route(roi2s, rngs["rbj"], cfg)
    roi2 = _jitter_route(b2, rngs["rbj"], cfg)

    z_t1 = _teacher_features(teacher, x1_hat, roi1)
    z_t2 = _teacher_features(teacher, views.x2, roi2)
    z_s1, tape1 = _student_view(student, x1_hat, roi1)
    z_s2, tape2s = _student_view(student, x2s_hat, roi2s)

    inv_k = 1.0 / k
    dc_list, dz1, dz2 = [], [], []
    for i in range(k):
        v_a, g_a, _ = info_nce_with_grads(z_s1[i], z_t2[i], negatives, tau)
        v_b, g_b, _ = info_nce_with_grads(z_s2[i], z_t1[i], negatives, tau)
        dc_list.append(v_a + v_b)
        dz1.append(g_a * inv_k)
        dz2.append(g_b * inv_k)
    _student_view_backward(student, tape1, dz1, grads)
    _student_view_backward(student, tape2s, dz2, grads)

    if cfg.use_depositioning:
        size = views.x2.shape[0]
        t = sample_shared_shift(b2, size, size, rngs["shift"], integer=True)
        b_hat = [b.shifted(t) for b in b2]
        m = build_foreground_mask(b2, size, size)
        m_hat = build_foreground_mask(b_hat, size, size)
        m_hat, _ = prc(m_hat, b_hat, rngs["mask_cut"], cfg.aug, fill_value=0)
        xb = resize_image(donor_image, size, size)
        x3 = compose(views.x2, m, xb, m_hat, t)
        z_s3, tape3 = _student_view(student, x3, b_hat)
        dp_list, dz3 = [], []
        for i in range(k):
            v_a, g_a, _ = info_nce_with_grads(z_s3[i], z_t2[i], negatives, tau)
            v_b, g_b, _ = info_nce_with_grads(z_s3[i], z_t1[i], negatives, tau)
            dp_list.append(v_a + v_b)
            dz3.append((g_a + g_b) * inv_k)
        _student_view_backward(student, tape3, dz3, grads)
    else:
        dp_list = [0.0] * k

    bank_feats = np.asarray(z_t1 + z_t2)
    return dc_list, dp_list, bank_feats


def train_step(pair: EncoderPair, batch, bank: MemoryBank, cfg: TrainConfig,
               opt: SGD | None = None, step: int = 0, total_steps: int = 0,
               epoch: int = 0):
    """One optimization step over a batch of (image, proposals) samples.

    Returns (updated pair, bank, metrics).  Images whose crop drops every
    proposal are skipped and counted; only the student receives the gradient
    update, then the teacher moves by EMA and the bank enqueues the step's
    teacher features.
    """
    opt = opt or SGD(cfg.sgd_momentum, cfg.weight_decay)
    negatives = bank.snapshot()
    grads = zero_grads(pair.student)
    losses, dc_all, dp_all = [], [], []
    pending_feats = []
    skipped = 0
    for pos, (image, proposals) in enumerate(batch):
        rngs = image_rngs(cfg.seed, epoch, step * cfg.batch_size + pos)
        if len(batch) > 1:
            j = int(rngs["donor"].integers(len(batch) - 1))
            if j >= pos:
                j += 1
        else:
            j = pos
        donor = batch[j][0]
        try:
            dc_list, dp_list, feats = process_image(
                pair.student, pair.teacher, image, proposals, negatives,
                cfg, rngs, donor, grads)
        except NoSurvivingProposals:
            skipped += 1
            continue
        losses.append(total_loss(dc_list, dp_list))
        dc_all.append(float(np.mean(dc_list)))
        dp_all.append(float(np.mean(dp_list)))
        pending_feats.append(feats)

    n_eff = len(losses)
    lr = cfg.learning_rate(step, total_steps)
    if n_eff > 0:
        inv = np.asarray(1.0 / n_eff, list(grads.values())[0].dtype)
        for key in grads:
            grads[key] *= inv
        new_student = EncoderParams(pair.student.spec,
                                    opt.step(pair.student.weights, grads, lr))
        pair = EncoderPair(new_student, pair.teacher, pair.momentum_coefficient)
        pair = momentum_update(pair)
        bank_update(bank, np.concatenate(pending_feats, axis=0))
    metrics = {
        "step": step,
        "epoch": epoch,
        "loss": float(np.mean(losses)) if losses else None,
        "loss_dc": float(np.mean(dc_all)) if dc_all else None,
        "loss_dp": float(np.mean(dp_all)) if dp_all else None,
        "lr": lr,
        "bank_size": len(bank),
        "images": n_eff,
        "skipped": skipped,
    }
    return pair, bank, metrics


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------

def run_pretrain(cfg: TrainConfig, dataset: Dataset,
                 proposals: dict[str, list[BBox]] | None, out_dir,
                 resume=None) -> Path:
    """Full pretraining run; writes metrics JSONL and checkpoints.

    Checkpoints land at epoch boundaries, so resuming replays the exact rng
    streams of an uninterrupted run.  Returns the final checkpoint path.
    """
    if len(dataset) == 0:
        raise DataError("training dataset holds no images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prop_map = resolve_proposals(dataset, proposals or {}, GridSpec())

    opt = SGD(cfg.sgd_momentum, cfg.weight_decay)
    start_epoch = 0
    step = 0
    if resume is not None:
        pair, manifest, extras = load_checkpoint(resume)
        if manifest.get("config_hash") != cfg.digest():
            raise ConfigError("checkpoint was written by a different config")
        opt.load_state(extras)
        bank = MemoryBank.from_state({"buf": extras["bank.buf"],
                                      "meta": extras["bank.meta"]})
        start_epoch = int(manifest["epoch"])
        step = int(manifest["step"])
    else:
        pair = init_pair(cfg.backbone, keyed_rng(cfg.seed, *_INIT_KEY),
                         cfg.momentum_coefficient)
        bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
        prefill_bank(bank, keyed_rng(cfg.seed, *_PREFILL_KEY))

    n = len(dataset.images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"

    def save(path, epoch):
        extra = opt.state()
        extra.update({f"bank.{k}": v for k, v in bank.state().items()})
        return save_checkpoint(path, pair, step=step, config_hash=cfg.digest(),
                               extra_arrays=extra,
                               extra_manifest={"epoch": epoch})

    with metrics_path.open(mode) as mf:
        for epoch in range(start_epoch, cfg.epochs):
            order = keyed_rng(cfg.seed, epoch, _EPOCH_SHUFFLE, 0).permutation(n)
            for b0 in range(0, n, cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                batch = []
                for i in idx:
                    im = dataset.images[int(i)]
                    batch.append((im.image, prop_map[im.image_id]))
                pair, bank, metrics = train_step(
                    pair, batch, bank, cfg, opt, step=step,
                    total_steps=total_steps, epoch=epoch)
                mf.write(json.dumps(metrics) + "\n")
                step += 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and (epoch + 1) < cfg.epochs:
                save(out_dir / f"checkpoint_ep{epoch + 1:03d}.npz", epoch + 1)
    final = out_dir / "checkpoint_final.npz"
    save(final, cfg.epochs)
    return Path(final)
