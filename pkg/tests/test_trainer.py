import json

import numpy as np
import pytest

from regionssl import trainer as trainer_mod
from regionssl.augment import (AugConfig, build_foreground_mask, compose,
                               make_views, prc, prm, rbj, resize_image)
from regionssl.data import GridSpec, SceneSpec, grid_proposals, make_dataset
from regionssl.encoder import (BackboneSpec, EncoderPair, init_pair,
                               extract_region_feature, load_checkpoint)
from regionssl.errors import ConfigError
from regionssl.geometry import sample_shared_shift
from regionssl.loss import LossConfig, MemoryBank, info_nce, total_loss
from regionssl.trainer import (SGD, TrainConfig, image_rngs, keyed_rng,
                               prefill_bank, run_pretrain, train_step)


def tiny_cfg(**kw):
    base = dict(
        epochs=2, batch_size=2, proposals_per_image=2, seed=11,
        backbone=BackboneSpec(channels=(2, 3, 4, 5, 6), embed_dim=8),
        loss=LossConfig(temperature=0.2, bank_capacity=64),
    )
    base.update(kw)
    return TrainConfig(**base)


def scene_batch(n, seed=0, size=64):
    ds = make_dataset(np.random.default_rng(seed), SceneSpec(canvas_size=size), n)
    return [(im.image, grid_proposals(im.image, GridSpec((32,)), im.objects))
            for im in ds.images]


class TestKeyedRng:
    def test_reproducible_and_distinct(self):
        a = keyed_rng(3, 1, 2, 0).uniform()
        b = keyed_rng(3, 1, 2, 0).uniform()
        c = keyed_rng(3, 1, 2, 1).uniform()
        assert a == b
        assert a != c

    def test_image_rngs_streams_independent(self):
        rngs = image_rngs(5, 0, 0)
        before = rngs["shift"].uniform()
        rngs2 = image_rngs(5, 0, 0)
        _ = rngs2["prc1"].uniform(size=100)   # exhausting one stream
        assert rngs2["shift"].uniform() == before


class TestTrainConfig:
    def test_from_mapping_nested(self):
        cfg = TrainConfig.from_mapping({
            "epochs": 3,
            "proposals_per_image": 2,
            "aug.prc_cover_threshold": 0.4,
            "aug.prc_range": [0.3, 0.4],
            "loss.temperature": 0.5,
            "backbone.padding": "circular",
        })
        assert cfg.epochs == 3
        assert cfg.aug.prc_cover_threshold == 0.4
        assert cfg.aug.prc_range == (0.3, 0.4)
        assert cfg.loss.temperature == 0.5
        assert cfg.backbone.padding == "circular"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({"leaning_rate": 1.0})
        with pytest.raises(ConfigError):
            TrainConfig.from_mapping({"aug.bogus": 1.0})

    def test_cosine_schedule(self):
        cfg = tiny_cfg(base_lr=0.04)
        assert cfg.learning_rate(0, 100) == pytest.approx(0.04)
        assert cfg.learning_rate(50, 100) == pytest.approx(0.02)
        cfg2 = tiny_cfg(base_lr=0.04, lr_schedule="constant")
        assert cfg2.learning_rate(99, 100) == 0.04

    def test_digest_stable(self):
        assert tiny_cfg().digest() == tiny_cfg().digest()
        assert tiny_cfg().digest() != tiny_cfg(epochs=5).digest()


class TestSGD:
    def test_two_hand_computed_steps(self):
        opt = SGD(momentum=0.9, weight_decay=0.1)
        w = {"w": np.array([1.0])}
        w = opt.step(w, {"w": np.array([0.5])}, lr=0.1)
        assert w["w"][0] == pytest.approx(0.94)
        w = opt.step(w, {"w": np.array([0.0])}, lr=0.1)
        # v = 0.9*0.6 + 0.94*0.1 = 0.634 ; w = 0.94 - 0.0634
        assert w["w"][0] == pytest.approx(0.8766)


class TestTrainStep:
    def test_zero_lr_decouples_updates(self):
        cfg = tiny_cfg(base_lr=0.0, momentum_coefficient=0.9)
        pair = init_pair(cfg.backbone, np.random.default_rng(0), 0.9)
        # make the teacher differ so the EMA move is visible
        for k in pair.teacher.weights:
            pair.teacher.weights[k] = pair.teacher.weights[k] + 0.01
        student_before = {k: v.copy() for k, v in pair.student.weights.items()}
        expected_teacher = {
            k: t + (pair.student.weights[k] - t) * np.float32(0.1)
            for k, t in pair.teacher.weights.items()}
        bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
        batch = scene_batch(2)
        new_pair, _, metrics = train_step(pair, batch, bank, cfg,
                                          total_steps=10)
        for k in student_before:
            assert np.array_equal(new_pair.student.weights[k],
                                  student_before[k]), k
            np.testing.assert_allclose(new_pair.teacher.weights[k],
                                       expected_teacher[k], atol=1e-7)
        assert metrics["images"] == 2

    def test_teacher_untouched_by_optimizer(self):
        cfg = tiny_cfg(momentum_coefficient=1.0)
        pair = init_pair(cfg.backbone, np.random.default_rng(1), 1.0)
        teacher_before = {k: v.copy() for k, v in pair.teacher.weights.items()}
        bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
        new_pair, _, _ = train_step(pair, scene_batch(2), bank, cfg,
                                    total_steps=10)
        changed = sum(
            not np.array_equal(new_pair.student.weights[k],
                               pair.student.weights[k])
            for k in pair.student.weights)
        assert changed > 0   # the student actually moved
        for k, v in teacher_before.items():
            assert np.array_equal(new_pair.teacher.weights[k], v), k

    def test_deterministic_given_seed(self):
        cfg = tiny_cfg()

        def run():
            pair = init_pair(cfg.backbone, np.random.default_rng(2), 0.99)
            bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
            prefill_bank(bank, np.random.default_rng(3))
            opt = SGD(cfg.sgd_momentum, cfg.weight_decay)
            out = []
            for step in range(3):
                pair, bank, m = train_step(pair, scene_batch(2), bank, cfg,
                                           opt, step=step, total_steps=3)
                out.append(m)
            return pair, out

        pa, ma = run()
        pb, mb = run()
        assert ma == mb
        for k in pa.student.weights:
            assert np.array_equal(pa.student.weights[k], pb.student.weights[k])

    def test_all_images_skipped_is_noop(self):
        cfg = tiny_cfg(aug=AugConfig(min_visible=1.0,
                                     crop_scale_range=(0.25, 0.25),
                                     crop_aspect_range=(1.0, 1.0)))
        pair = init_pair(cfg.backbone, np.random.default_rng(3), 0.99)
        bank = MemoryBank(8, cfg.backbone.embed_dim)
        img = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
        from regionssl.geometry import BBox
        batch = [(img, [BBox(0, 0, 64, 64)])]
        new_pair, _, metrics = train_step(pair, batch, bank, cfg, total_steps=1)
        assert metrics["skipped"] == 1
        assert metrics["images"] == 0
        assert metrics["loss"] is None
        for k, v in pair.student.weights.items():
            assert np.array_equal(new_pair.student.weights[k], v)

    def test_loss_matches_hand_composed_pipeline(self):
        """K=1, one image: the step loss must equal the same pipeline built
        from the public module operations, sharing only the rng derivation."""
        cfg = tiny_cfg(proposals_per_image=1, batch_size=1, seed=29)
        pair = init_pair(cfg.backbone, np.random.default_rng(4), 0.99)
        bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
        prefill_bank(bank, np.random.default_rng(5))
        negatives = bank.snapshot()
        batch = scene_batch(1, seed=6)
        image, proposals = batch[0]

        _, _, metrics = train_step(pair, batch, bank, cfg, total_steps=1)

        # --- hand-composed reference ---
        rngs = image_rngs(cfg.seed, 0, 0)
        tau = cfg.loss.temperature
        views = make_views(image, proposals, rngs["views"], cfg.aug)
        k = cfg.proposals_per_image
        idx = [int(i) for i in
               rngs["select"].choice(len(views.boxes_v2), size=k,
                                     replace=False)] \
            if len(views.boxes_v2) >= k else \
            [i % len(views.boxes_v2) for i in range(k)]
        b1 = [views.boxes_v1[i] for i in idx]
        b2 = [views.boxes_v2[i] for i in idx]
        b2s = [views.boxes_v2s[i] for i in idx]
        x1_hat, _ = prc(views.x1, b1, rngs["prc1"], cfg.aug)
        x2s_hat, _ = prc(views.x2s, b2s, rngs["prc2"], cfg.aug)
        x1_hat, _ = prm(x1_hat, b1, rngs["prm1"], cfg.aug)
        x2s_hat, _ = prm(x2s_hat, b2s, rngs["prm2"], cfg.aug)
        roi1 = [rbj(b, rngs["rbj"], cfg.aug) for b in b1]
        roi2s = [rbj(b, rngs["rbj"], cfg.aug) for b in b2s]
        roi2 = [rbj(b, rngs["rbj"], cfg.aug) for b in b2]
        z_t1 = [extract_region_feature(pair.teacher, x1_hat, b) for b in roi1]
        z_t2 = [extract_region_feature(pair.teacher, views.x2, b) for b in roi2]
        z_s1 = [extract_region_feature(pair.student, x1_hat, b) for b in roi1]
        z_s2 = [extract_region_feature(pair.student, x2s_hat, b) for b in roi2s]
        dc = [info_nce(z_s1[i], z_t2[i], negatives, tau)
              + info_nce(z_s2[i], z_t1[i], negatives, tau) for i in range(k)]
        size = views.x2.shape[0]
        t = sample_shared_shift(b2, size, size, rngs["shift"], integer=True)
        b_hat = [b.shifted(t) for b in b2]
        m = build_foreground_mask(b2, size, size)
        m_hat = build_foreground_mask(b_hat, size, size)
        m_hat, _ = prc(m_hat, b_hat, rngs["mask_cut"], cfg.aug, fill_value=0)
        xb = resize_image(image, size, size)   # single-image batch: donor=self
        x3 = compose(views.x2, m, xb, m_hat, t)
        z_s3 = [extract_region_feature(pair.student, x3, b) for b in b_hat]
        dp = [info_nce(z_s3[i], z_t2[i], negatives, tau)
              + info_nce(z_s3[i], z_t1[i], negatives, tau) for i in range(k)]
        expected = total_loss(dc, dp)

        assert metrics["loss"] == expected

    def test_step_zero_loss_within_softmax_bound(self):
        cfg = tiny_cfg()
        pair = init_pair(cfg.backbone, np.random.default_rng(5), 0.99)
        bank = MemoryBank(cfg.loss.bank_capacity, cfg.backbone.embed_dim)
        prefill_bank(bank, np.random.default_rng(6))
        _, _, metrics = train_step(pair, scene_batch(2), bank, cfg,
                                   total_steps=1)
        bound = 2 * 2 * np.log(cfg.loss.bank_capacity + 1) / cfg.loss.temperature
        assert 0.0 <= metrics["loss"] <= bound


class TestRunPretrain:
    def _dataset(self, n=6, seed=0):
        return make_dataset(np.random.default_rng(seed),
                            SceneSpec(canvas_size=64), n)

    def test_zero_epochs_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_cfg(epochs=0)
        ds = self._dataset()
        final = run_pretrain(cfg, ds, None, tmp_path / "run")
        pair, manifest, _ = load_checkpoint(final)
        assert manifest["step"] == 0
        expected = init_pair(cfg.backbone,
                             keyed_rng(cfg.seed, *trainer_mod._INIT_KEY),
                             cfg.momentum_coefficient)
        for k, v in expected.student.weights.items():
            assert np.array_equal(pair.student.weights[k], v)

    def test_resume_restores_and_matches_straight_run(self, tmp_path):
        cfg = tiny_cfg(epochs=2, checkpoint_every=1)
        ds = self._dataset()
        final_a = run_pretrain(cfg, ds, None, tmp_path / "a")
        mid = tmp_path / "a" / "checkpoint_ep001.npz"
        assert mid.exists()
        _, mid_manifest, mid_extras = load_checkpoint(mid)
        assert mid_manifest["epoch"] == 1
        assert mid_manifest["step"] == 3   # ceil(6/2) steps per epoch
        assert "bank.buf" in mid_extras
        final_b = run_pretrain(cfg, ds, None, tmp_path / "b", resume=mid)
        assert final_a.read_bytes() == final_b.read_bytes()

    def test_resume_config_mismatch_rejected(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        ds = self._dataset()
        final = run_pretrain(cfg, ds, None, tmp_path / "r")
        with pytest.raises(ConfigError):
            run_pretrain(tiny_cfg(epochs=3, base_lr=0.123), ds, None,
                         tmp_path / "r2", resume=final)

    def test_metrics_written_per_step(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        ds = self._dataset()
        run_pretrain(cfg, ds, None, tmp_path / "m")
        lines = (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert {"step", "epoch", "loss", "loss_dc", "loss_dp", "lr",
                "bank_size", "images", "skipped"} <= set(rec)

    def test_loss_decreases_on_smoke_run(self, tmp_path):
        cfg = tiny_cfg(epochs=6, batch_size=6, base_lr=0.05,
                       loss=LossConfig(temperature=0.2, bank_capacity=256))
        ds = self._dataset(n=18, seed=4)
        run_pretrain(cfg, ds, None, tmp_path / "s")
        recs = [json.loads(l) for l in
                (tmp_path / "s" / "metrics.jsonl").read_text().splitlines()]
        first = np.mean([r["loss"] for r in recs[:3]])
        last = np.mean([r["loss"] for r in recs[-3:]])
        assert last < first
