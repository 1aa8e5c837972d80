"""
Masked transformer tests - schedule, corruption, remasking, control branch equivalence, training
"""
import math

import numpy as np
import pytest

import diffcore as dc
from config import TransformerConfig
from diffcore import ShapeError, Tensor
from maskmodel import (CONTROL_CHANNELS, cfg_logits, confidence_remask, control_window, corrupt, density_levels,
                       drop_labels, forward_base, forward_controlled, init_base, init_control, mask_schedule,
                       masked_nll, predict_residual_levels, random_control)

K, T_TOKENS, C = 8, 4, 8


@pytest.fixture(scope='module')
def small_base():
    cfg = TransformerConfig(layers=2, embed=16, heads=2, residual_hidden=16)
    return init_base(cfg, K, T_TOKENS, C, levels=2, code_dim=4, seed=0)


class TestSchedule:
    def test_endpoints_and_monotone(self):
        assert mask_schedule(0, 10) == 1.0
        values = [mask_schedule(i, 10) for i in range(10)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] > 0.0
        assert mask_schedule(5, 10) == pytest.approx(math.cos(math.pi / 4))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mask_schedule(10, 10)
        with pytest.raises(ValueError):
            mask_schedule(-1, 10)


class TestCorrupt:
    def test_count_is_ceiling(self, rng):
        tokens = np.arange(10)
        for ratio, expected in ((0.05, 1), (0.25, 3), (0.5, 5), (0.91, 10), (1.0, 10)):
            out, mask = corrupt(tokens, ratio, rng, mask_id=99)
            assert mask.sum() == expected
            assert np.all(out[mask] == 99)
            assert np.array_equal(out[~mask], tokens[~mask])

    def test_ratio_range(self, rng):
        with pytest.raises(ValueError):
            corrupt(np.arange(4), 0.0, rng, mask_id=9)
        with pytest.raises(ValueError):
            corrupt(np.arange(4), 1.5, rng, mask_id=9)

    def test_drop_labels(self, rng):
        labels = np.zeros(1000, dtype=np.int64)
        dropped = drop_labels(labels, 0.1, rng, null_label=8)
        assert set(np.unique(dropped)) <= {0, 8}
        assert 50 < int((dropped == 8).sum()) < 150
        assert np.array_equal(drop_labels(labels, 0.0, rng, 8), labels)


class TestConfidenceRemask:
    def test_least_confident_go_back(self):
        probs = np.array([[0.9, 0.1], [0.4, 0.6], [0.2, 0.8], [0.7, 0.3]])
        sampled = np.array([0, 0, 1, 0])
        out = confidence_remask(probs, sampled, keep_masked=2)
        # confidences 0.9, 0.4, 0.8, 0.7
        assert out.tolist() == [0, 2, 1, 2]

    def test_ties_go_to_lower_position(self):
        probs = np.full((4, 2), 0.5)
        out = confidence_remask(probs, np.zeros(4, dtype=int), keep_masked=1, mask_id=7)
        assert out.tolist() == [7, 0, 0, 0]

    def test_frozen_positions_are_kept(self):
        probs = np.array([[0.1, 0.9], [0.2, 0.8], [0.3, 0.7]])
        sampled = np.zeros(3, dtype=int)
        out = confidence_remask(probs, sampled, keep_masked=1, frozen=[0], mask_id=5)
        assert out.tolist() == [0, 5, 0]
        with pytest.raises(ValueError):
            confidence_remask(probs, sampled, keep_masked=3, frozen=[0])

    def test_zero_keeps_everything(self):
        sampled = np.array([1, 0, 1])
        assert np.array_equal(confidence_remask(np.full((3, 2), 0.5), sampled, 0), sampled)


class TestForward:
    def test_base_shapes(self, small_base, rng):
        ids = rng.integers(0, K + 1, size=(3, T_TOKENS))
        assert forward_base(ids, [1, 2, C], small_base).shape == (3, T_TOKENS, K)
        assert forward_base(ids[0], 1, small_base).shape == (T_TOKENS, K)
        with pytest.raises(ShapeError):
            forward_base(ids, [1, 2], small_base)

    def test_zero_init_branch_matches_base(self, small_base, rng):
        joints = 3
        ctrl = init_control(small_base, joints, seed=1)
        ids = rng.integers(0, K + 1, size=(100, T_TOKENS))
        labels = rng.integers(0, C + 1, size=100)
        frames = 4 * T_TOKENS
        targets = rng.normal(size=(100, frames, joints, 3))
        mask = (rng.uniform(size=(100, frames, joints)) < 0.3).astype(float)
        window = control_window(targets, mask, rng.normal(size=targets.shape))
        base = forward_base(ids, labels, small_base).data
        controlled = forward_controlled(ids, labels, window, small_base, ctrl).data
        assert np.array_equal(base, controlled)

    def test_window_layout(self, rng):
        targets = rng.normal(size=(8, 2, 3))
        mask = np.zeros((8, 2))
        mask[5, 1] = 1.0
        window = control_window(targets, mask)
        assert window.shape == (2, 4 * 2 * CONTROL_CHANNELS)
        per_frame = window.reshape(2, 4, 2, CONTROL_CHANNELS)
        assert np.array_equal(per_frame[1, 1, 1, :3], targets[5, 1])
        assert per_frame[1, 1, 1, 3] == 1.0
        assert np.count_nonzero(per_frame) == 4
        with pytest.raises(ShapeError):
            control_window(np.zeros((6, 2, 3)), np.zeros((6, 2)))

    def test_window_frame_mismatch(self, small_base, rng):
        ctrl = init_control(small_base, 2, seed=1)
        window = control_window(np.zeros((8, 2, 3)), np.zeros((8, 2)))
        with pytest.raises(ShapeError):
            forward_controlled(np.zeros(T_TOKENS, dtype=int), 0, window, small_base, ctrl)

    def test_control_copies_base_layers(self, small_base):
        ctrl = init_control(small_base, 2, seed=1)
        for name, value in ctrl.params.items():
            if name.startswith('layer'):
                assert np.array_equal(value, small_base.params[name])
                assert value is not small_base.params[name]
            elif name.startswith('conn'):
                assert not np.any(value)


class TestGuidanceAndLoss:
    def test_cfg_scale_one_is_conditional(self, rng):
        cond, uncond = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        assert np.allclose(cfg_logits(cond, uncond, 1.0), cond)
        assert np.allclose(cfg_logits(cond, uncond, 0.0), uncond)
        assert np.allclose(cfg_logits(cond, uncond, 4.0), uncond + 4.0 * (cond - uncond))

    def test_masked_nll(self, rng):
        logits = rng.normal(size=(3, 5))
        targets = np.array([0, 4, 2])
        mask = np.array([True, False, True])
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        expected = -(logp[0, 0] + logp[2, 2]) / 2
        assert float(masked_nll(Tensor(logits), targets, mask).data) == pytest.approx(expected)
        with pytest.raises(ValueError):
            masked_nll(Tensor(logits), targets, np.zeros(3, dtype=bool))

    def test_masked_nll_gradient(self, rng):
        targets = np.array([1, 3])
        mask = np.array([1.0, 1.0])
        assert dc.gradcheck(lambda x: masked_nll(x, targets, mask), rng.normal(size=(2, 4))) < 1e-6


class TestControlSampling:
    def test_density_levels(self):
        assert density_levels(196) == [1, 2, 5, 49, 196]
        assert density_levels(16) == [1, 2, 5, 4, 16]

    def test_random_control(self, rng):
        motion = rng.normal(size=(16, 6, 3))
        targets, mask = random_control(motion, rng, density_levels(16))
        assert 1 <= len(np.flatnonzero(mask.any(axis=0))) <= 3
        assert np.array_equal(targets, motion * mask[..., None])


class TestTrained:
    def test_control_training_leaves_base_untouched(self, trained):
        for name, value in trained.base_snapshot.items():
            assert np.array_equal(trained.base.params[name], value)

    def test_histories(self, trained, tiny_config):
        assert len(trained.base.history) == tiny_config.transformer.epochs
        assert len(trained.control.history) == tiny_config.transformer.control_epochs
        assert all(np.isfinite(row['loss']) for row in trained.base.history + trained.control.history)

    def test_residual_levels(self, trained, tiny_config):
        level0 = np.arange(tiny_config.tokens) % tiny_config.tokenizer.codebook_size
        ids = predict_residual_levels(trained.base, trained.tokenizer, level0, label=1)
        assert ids.shape == (tiny_config.tokens, tiny_config.tokenizer.levels)
        assert np.array_equal(ids[:, 0], level0)
        assert ids.min() >= 0 and ids.max() < tiny_config.tokenizer.codebook_size
        again = predict_residual_levels(trained.base, trained.tokenizer, level0, label=1)
        assert np.array_equal(ids, again)
