import copy

import numpy as np
import pytest
import torch

from aghash.datasets import generate_synthetic
from aghash.hashnet import load_checkpoint
from aghash.losses import guide_loss
from aghash.trainer import (ModelConfig, TrainConfig, TrainingDivergenceError,
                            build_networks, extract_attention_codes, read_history_csv,
                            run_pipeline, train_stage1, train_stage2,
                            write_history_csv)

TINY_MODEL = ModelConfig(attention_channels=2, conv_channels=(4, 8), fc_dim=16)


def tiny_dataset(seed=0, per_class=8):
    return generate_synthetic(3, per_class, (8, 8, 3), 0.25, seed)


def tiny_config(**overrides):
    defaults = dict(code_length=8, epochs_stage1=2, epochs_stage2=2,
                    batch_size=8, lr=0.01, seed=1)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def state_dicts_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestStage1:
    def test_zero_epochs_returns_initial_parameters(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage1=0)
        att, h1, history = train_stage1(ds, cfg, TINY_MODEL)
        fresh_att, fresh_h1, _ = build_networks(ds.image_shape, cfg, TINY_MODEL)
        assert history == []
        assert state_dicts_equal(att, fresh_att)
        assert state_dicts_equal(h1, fresh_h1)

    def test_deterministic_history(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage1=3)
        _, _, h_a = train_stage1(ds, cfg, TINY_MODEL)
        _, _, h_b = train_stage1(ds, cfg, TINY_MODEL)
        assert h_a == h_b

    def test_seed_changes_trajectory(self):
        ds = tiny_dataset()
        _, _, h_a = train_stage1(ds, tiny_config(seed=1), TINY_MODEL)
        _, _, h_b = train_stage1(ds, tiny_config(seed=2), TINY_MODEL)
        assert h_a != h_b

    def test_beta_follows_schedule(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage1=5, beta_growth=2.0, beta_max=4.0)
        _, _, history = train_stage1(ds, cfg, TINY_MODEL)
        betas = [row["beta"] for row in history]
        assert betas == [1.0, 2.0, 4.0, 4.0, 4.0]
        assert all(b >= a for a, b in zip(betas, betas[1:]))

    def test_zero_lr_keeps_parameters(self):
        ds = tiny_dataset()
        cfg = tiny_config(lr=0.0, epochs_stage1=2)
        att, h1, _ = train_stage1(ds, cfg, TINY_MODEL)
        fresh_att, fresh_h1, _ = build_networks(ds.image_shape, cfg, TINY_MODEL)
        assert state_dicts_equal(att, fresh_att)
        assert state_dicts_equal(h1, fresh_h1)

    def test_gradient_reaches_attention_parameters(self):
        from aghash.attention import attend
        from aghash.datasets import pair_batches
        from aghash.losses import attention_loss, semantic_loss

        ds = tiny_dataset()
        cfg = tiny_config()
        att, h1, _ = build_networks(ds.image_shape, cfg, TINY_MODEL)
        batch = next(pair_batches(ds, 8, seed=0))
        images = torch.from_numpy(batch.images).permute(0, 3, 1, 2)
        attended, _ = attend(images, att)
        codes = torch.tanh(h1(attended))
        loss = semantic_loss(codes, batch.sim) + 50.0 * attention_loss(codes, batch.sim, 0.3)
        loss.backward()
        grads = [p.grad for p in att.parameters()]
        assert any(g is not None and g.abs().max() > 0 for g in grads)

    def test_single_class_rejected(self):
        ds = generate_synthetic(2, 4, (8, 8, 3), 0.2, 0)
        single = type(ds)(
            samples=tuple(s for s in ds.samples if 0 in s.labels)[:4],
            split="train", image_shape=ds.image_shape)
        # rebuild ids contiguously
        from aghash.datasets import ImageSample, Dataset
        samples = tuple(ImageSample(i, s.pixels, s.labels)
                        for i, s in enumerate(single.samples))
        one_class = Dataset(samples=samples, split="train", image_shape=ds.image_shape)
        with pytest.raises(ValueError, match="classes"):
            train_stage1(one_class, tiny_config(), TINY_MODEL)

    def test_divergence_reported_with_location(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        att, h1, _ = build_networks(ds.image_shape, cfg, TINY_MODEL)
        with torch.no_grad():
            h1.fch.bias.fill_(float("nan"))
        with pytest.raises(TrainingDivergenceError) as err:
            train_stage1(ds, cfg, TINY_MODEL, networks=(att, h1))
        assert err.value.stage == 1
        assert err.value.epoch == 0
        assert err.value.component in ("semantic", "attention", "total")


class TestExtractCodes:
    def test_shape_and_values(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        att, h1, _ = build_networks(ds.image_shape, cfg, TINY_MODEL)
        targets = extract_attention_codes(ds, att, h1)
        assert targets.shape == (len(ds), cfg.code_length)
        assert set(np.unique(targets)) <= {0, 1}

    def test_minus_one_maps_to_zero(self):
        from aghash.hashnet import encode_attention_guided_many

        ds = tiny_dataset()
        att, h1, _ = build_networks(ds.image_shape, tiny_config(), TINY_MODEL)
        signed = encode_attention_guided_many(ds.pixel_stack(), att, h1)
        targets = extract_attention_codes(ds, att, h1)
        assert ((signed == 1) == (targets == 1)).all()
        assert ((signed == -1) == (targets == 0)).all()

    def test_re_extraction_identical(self):
        ds = tiny_dataset()
        att, h1, _ = build_networks(ds.image_shape, tiny_config(), TINY_MODEL)
        a = extract_attention_codes(ds, att, h1)
        b = extract_attention_codes(ds, att, h1)
        assert (a == b).all()


class TestStage2:
    def test_zero_epochs_returns_initial(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage2=0)
        targets = np.zeros((len(ds), cfg.code_length), dtype=np.uint8)
        h2, history = train_stage2(ds, targets, cfg, TINY_MODEL)
        _, _, fresh = build_networks(ds.image_shape, cfg, TINY_MODEL)
        assert history == []
        assert state_dicts_equal(h2, fresh)

    def test_learns_learnable_targets(self):
        ds = tiny_dataset(per_class=10)
        cfg = tiny_config(epochs_stage2=15, lr=0.02)
        rng = np.random.default_rng(0)
        class_codes = rng.integers(0, 2, size=(3, cfg.code_length))
        labels = [next(iter(s.labels)) for s in ds.samples]
        targets = np.stack([class_codes[l] for l in labels]).astype(np.uint8)
        h2, history = train_stage2(ds, targets, cfg, TINY_MODEL)
        assert history[-1]["guide"] < np.log(2.0)
        assert history[-1]["guide"] < history[0]["guide"]
        logits = h2(torch.from_numpy(ds.pixel_stack()).permute(0, 3, 1, 2))
        final_loss = float(guide_loss(logits.detach(), targets))
        assert final_loss < np.log(2.0)

    def test_target_validation(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        with pytest.raises(ValueError):
            train_stage2(ds, np.zeros((3, cfg.code_length)), cfg, TINY_MODEL)
        bad = np.full((len(ds), cfg.code_length), 2)
        with pytest.raises(ValueError):
            train_stage2(ds, bad, cfg, TINY_MODEL)

    def test_deterministic(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage2=3)
        targets = np.tile([0, 1], (len(ds), cfg.code_length // 2)).astype(np.uint8)
        h2a, ha = train_stage2(ds, targets, cfg, TINY_MODEL)
        h2b, hb = train_stage2(ds, targets, cfg, TINY_MODEL)
        assert ha == hb
        assert state_dicts_equal(h2a, h2b)


class TestPipeline:
    def test_emits_both_checkpoints(self, tmp_path):
        ds = tiny_dataset()
        state = run_pipeline(ds, tiny_config(), TINY_MODEL, out_dir=tmp_path)
        nets1, meta1 = load_checkpoint(tmp_path / "stage1")
        nets2, meta2 = load_checkpoint(tmp_path / "stage2")
        assert set(nets1) == {"attention", "hash1"}
        assert set(nets2) == {"hash2"}
        assert meta1["stage"] == 1 and meta2["stage"] == 2
        assert state.attention_targets.shape == (len(ds), 8)

    def test_beta_final_matches_schedule_arithmetic(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage1=3, beta_growth=2.0, beta_max=1024.0)
        state = run_pipeline(ds, cfg, TINY_MODEL)
        assert state.beta_final == min(cfg.beta_max, cfg.beta_growth ** cfg.epochs_stage1)

    def test_stage2_leaves_stage1_parameters_untouched(self, tmp_path):
        ds = tiny_dataset()
        state = run_pipeline(ds, tiny_config(), TINY_MODEL, out_dir=tmp_path)
        saved, _ = load_checkpoint(tmp_path / "stage1")  # written before stage 2 ran
        assert state_dicts_equal(state.attention_net, saved["attention"])
        assert state_dicts_equal(state.hash_net1, saved["hash1"])

    def test_resume_stage2_reproduces_run(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_config()
        state = run_pipeline(ds, cfg, TINY_MODEL, out_dir=tmp_path)
        nets, _ = load_checkpoint(tmp_path / "stage1")
        targets = extract_attention_codes(ds, nets["attention"], nets["hash1"])
        assert (targets == state.attention_targets).all()
        h2, _ = train_stage2(ds, targets, cfg, TINY_MODEL)
        assert state_dicts_equal(h2, state.hash_net2)

    def test_history_epoch_numbering(self):
        ds = tiny_dataset()
        cfg = tiny_config(epochs_stage1=2, epochs_stage2=3)
        state = run_pipeline(ds, cfg, TINY_MODEL)
        assert [row["epoch"] for row in state.history] == [1, 2, 3, 4, 5]
        assert [row["stage"] for row in state.history] == [1, 1, 2, 2, 2]


class TestHistoryCsv:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset()
        state = run_pipeline(ds, tiny_config(), TINY_MODEL)
        path = tmp_path / "history.csv"
        write_history_csv(path, state.history)
        rows = read_history_csv(path)
        assert len(rows) == len(state.history)
        header = path.read_text().splitlines()[0]
        assert header == "epoch,sem,att,penalty,guide,total"
        for row, original in zip(rows, state.history):
            assert row["epoch"] == original["epoch"]
            assert row["total"] == pytest.approx(original["total"], rel=1e-15)
            if original["guide"] is None:
                assert row["guide"] is None
