import math

import numpy as np
import pytest
import torch

from aghash.losses import (attention_loss, guide_grad, guide_loss,
                           half_inner_product, semantic_loss, stage1_loss)

from oracles import (attention_loss_bruteforce, central_difference,
                     guide_loss_bruteforce, semantic_loss_bruteforce)

LN2 = math.log(2.0)


class TestHalfInnerProduct:
    def test_self_product(self):
        a = np.array([1.0, -1.0, 1.0, 1.0])
        assert float(half_inner_product(a, a)) == 2.0  # K/2

    def test_antipodal(self):
        a = np.array([1.0, -1.0, 1.0, 1.0])
        assert float(half_inner_product(a, -a)) == -2.0

    def test_orthogonal(self):
        assert float(half_inner_product([1.0, -1.0], [1.0, 1.0])) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            half_inner_product([1.0, 1.0], [1.0, 1.0, 1.0])


class TestSemanticLoss:
    def test_single_pair_theta_zero_similar(self):
        codes = np.array([[1.0, -1.0], [1.0, 1.0]])  # theta = 0
        sim = np.array([[1, 1], [1, 1]])
        assert float(semantic_loss(codes, sim)) == pytest.approx(LN2, abs=1e-12)

    def test_single_pair_theta_zero_dissimilar(self):
        codes = np.array([[1.0, -1.0], [1.0, 1.0]])
        sim = np.array([[1, 0], [0, 1]])
        assert float(semantic_loss(codes, sim)) == pytest.approx(LN2, abs=1e-12)

    def test_matches_bruteforce_three_codes(self):
        rng = np.random.default_rng(0)
        codes = rng.uniform(-1, 1, size=(3, 8))
        labels = [0, 0, 1]
        sim = np.array([[int(a == b) for b in labels] for a in labels])
        want = semantic_loss_bruteforce(codes.tolist(), sim.tolist())
        assert float(semantic_loss(codes, sim)) == pytest.approx(want, abs=1e-10)

    def test_monotone_in_theta(self):
        # raising theta of a similar pair lowers the loss; of a dissimilar pair raises it
        sim_similar = np.array([[1, 1], [1, 1]])
        sim_dissimilar = np.array([[1, 0], [0, 1]])
        lo = np.array([[0.5, 0.5], [0.5, 0.5]])
        hi = np.array([[0.9, 0.9], [0.9, 0.9]])
        assert float(semantic_loss(hi, sim_similar)) < float(semantic_loss(lo, sim_similar))
        assert float(semantic_loss(hi, sim_dissimilar)) > float(semantic_loss(lo, sim_dissimilar))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        codes = rng.uniform(-1, 1, size=(6, 8))
        labels = rng.integers(0, 2, size=6)
        sim = (labels[:, None] == labels[None, :]).astype(int)
        perm = rng.permutation(6)
        a = float(semantic_loss(codes, sim))
        b = float(semantic_loss(codes[perm], sim[np.ix_(perm, perm)]))
        assert a == pytest.approx(b, rel=1e-12)

    def test_non_binary_sim_rejected(self):
        codes = np.zeros((2, 4))
        with pytest.raises(ValueError):
            semantic_loss(codes, np.array([[1, 0.5], [0.5, 1]]))

    def test_stable_for_large_theta(self):
        # |theta| = 1000 must stay finite in both directions
        codes = np.array([[2000.0], [1.0]])
        for sim in (np.array([[1, 1], [1, 1]]), np.array([[1, 0], [0, 1]])):
            assert math.isfinite(float(semantic_loss(codes, sim)))
            assert math.isfinite(float(semantic_loss(-codes, sim)))


class TestAttentionLoss:
    def test_perfect_match_similar_pair_is_margin(self):
        codes = np.array([[0.3, -0.7, 0.2], [0.3, -0.7, 0.2]])
        sim = np.array([[1, 1], [1, 1]])
        for margin in (0.1, 0.3, 0.5):
            assert float(attention_loss(codes, sim, margin)) == pytest.approx(margin, abs=1e-12)

    def test_opposite_dissimilar_pair_is_margin(self):
        codes = np.array([[0.3, -0.7, 0.2], [-0.3, 0.7, -0.2]])
        sim = np.array([[1, 0], [0, 1]])
        assert float(attention_loss(codes, sim, 0.3)) == pytest.approx(0.3, abs=1e-12)

    def test_orthogonal_similar_pair_inactive_hinge(self):
        codes = np.array([[1.0, 0.0], [0.0, 1.0]])  # cos = 0 -> c = 0.5
        sim = np.array([[1, 1], [1, 1]])
        assert float(attention_loss(codes, sim, 0.3)) == pytest.approx(0.5, abs=1e-12)

    def test_per_pair_contribution_identity(self):
        rng = np.random.default_rng(2)
        margin = 0.3
        for _ in range(20):
            codes = rng.normal(size=(2, 6))
            s = int(rng.integers(0, 2))
            sim = np.array([[1, s], [s, 1]])
            unit = codes / np.linalg.norm(codes, axis=1, keepdims=True)
            c = (unit[0] @ unit[1] + 1) / 2
            d = abs(s - c)
            want = d + max(0.0, margin - d)
            assert float(attention_loss(codes, sim, margin)) == pytest.approx(want, rel=1e-9)
            assert want >= 0.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        codes = rng.normal(size=(5, 7))
        labels = rng.integers(0, 2, size=5)
        sim = (labels[:, None] == labels[None, :]).astype(int)
        want = attention_loss_bruteforce(codes.tolist(), sim.tolist(), 0.3)
        assert float(attention_loss(codes, sim, 0.3)) == pytest.approx(want, rel=1e-9)

    def test_zero_norm_row_rejected(self):
        codes = np.array([[0.0, 0.0], [1.0, 0.0]])
        sim = np.array([[1, 1], [1, 1]])
        with pytest.raises(ValueError):
            attention_loss(codes, sim, 0.3)

    def test_non_positive_margin_rejected(self):
        codes = np.array([[1.0, 0.0], [0.0, 1.0]])
        sim = np.eye(2, dtype=int)
        with pytest.raises(ValueError):
            attention_loss(codes, sim, 0.0)


class TestStage1Loss:
    def test_weight_zero_drops_attention_term(self):
        rng = np.random.default_rng(4)
        codes = rng.uniform(-0.9, 0.9, size=(4, 8))
        labels = [0, 0, 1, 1]
        sim = np.array([[int(a == b) for b in labels] for a in labels])
        lv = stage1_loss(codes, sim, attention_weight=0.0, margin=0.3, beta=2.0, reg=0.001)
        want = float(semantic_loss(codes, sim)) + 0.001 / 4.0
        assert float(lv.value) == pytest.approx(want, rel=1e-12)

    def test_components_sum_to_value(self):
        rng = np.random.default_rng(5)
        codes = rng.uniform(-0.9, 0.9, size=(5, 6)).astype(np.float64)
        labels = [0, 1, 0, 1, 0]
        sim = np.array([[int(a == b) for b in labels] for a in labels])
        nu = 50.0
        lv = stage1_loss(codes, sim, attention_weight=nu, margin=0.3, beta=4.0, reg=0.001)
        recombined = (float(lv.components["sem"]) + nu * float(lv.components["att"])
                      + float(lv.components["penalty"]))
        assert float(lv.value) == pytest.approx(recombined, abs=1e-12)
        assert set(lv.components) == {"sem", "att", "penalty"}

    def test_penalty_value(self):
        codes = np.array([[0.1, 0.2], [0.3, -0.1]])
        sim = np.eye(2, dtype=int)
        lv = stage1_loss(codes, sim, 1.0, 0.3, beta=10.0, reg=0.001)
        assert float(lv.components["penalty"]) == pytest.approx(1e-5, rel=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            stage1_loss(np.ones((2, 2)), np.eye(2, dtype=int), -1.0, 0.3, 1.0, 0.001)


class TestGuideLoss:
    def test_zero_logits_any_targets(self):
        rng = np.random.default_rng(6)
        targets = rng.integers(0, 2, size=(4, 8))
        logits = np.zeros((4, 8))
        assert float(guide_loss(logits, targets)) == pytest.approx(LN2, abs=1e-12)

    def test_confident_correct_logit(self):
        # -log sigmoid(20), frozen from an mpmath evaluation
        val = float(guide_loss(np.array([[20.0]]), np.array([[1]])))
        assert val == pytest.approx(2.061153620314381e-09, rel=1e-9)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(scale=3.0, size=(2, 3))
        targets = rng.integers(0, 2, size=(2, 3))
        want = guide_loss_bruteforce(logits.tolist(), targets.tolist())
        assert float(guide_loss(logits, targets)) == pytest.approx(want, abs=1e-10)

    def test_stable_for_large_logits(self):
        logits = np.array([[100.0, -100.0]])
        for targets in (np.array([[1, 0]]), np.array([[0, 1]])):
            assert math.isfinite(float(guide_loss(logits, targets)))

    def test_non_binary_targets_rejected(self):
        with pytest.raises(ValueError):
            guide_loss(np.zeros((1, 2)), np.array([[0.5, 1.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            guide_loss(np.zeros((1, 2)), np.zeros((2, 2)))


class TestGuideGrad:
    def test_zero_logit_target_one(self):
        grad = guide_grad(np.array([[0.0]]), np.array([[1]]))
        assert float(grad) == pytest.approx(-0.5, abs=1e-15)

    def test_zero_logit_target_zero(self):
        grad = guide_grad(np.array([[0.0]]), np.array([[0]]))
        assert float(grad) == pytest.approx(0.5, abs=1e-15)

    def test_vanishes_at_confident_correct(self):
        grad = guide_grad(np.array([[50.0, -50.0]]), np.array([[1, 0]]))
        assert np.abs(grad.numpy()).max() < 1e-20

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            logits = rng.normal(scale=2.0, size=(5, 8))
            targets = rng.integers(0, 2, size=(5, 8))
            analytic = guide_grad(logits, targets).numpy()
            for _ in range(6):
                i, j = rng.integers(0, 5), rng.integers(0, 8)

                def f(v, i=i, j=j):
                    perturbed = logits.copy()
                    perturbed[i, j] = v
                    return float(guide_loss(perturbed, targets))

                fd = central_difference(f, logits[i, j], 1e-6)
                assert analytic[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-12)

    def test_matches_autograd(self):
        rng = np.random.default_rng(9)
        logits = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        targets = torch.tensor(rng.integers(0, 2, size=(3, 4)).astype(np.float64))
        guide_loss(logits, targets).backward()
        assert torch.allclose(logits.grad, guide_grad(logits.detach(), targets), atol=1e-12)
