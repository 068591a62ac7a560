import math

import numpy as np
import pytest

from hiercon import tensor as tc
from hiercon.losses import (
    Batch,
    LossConfig,
    brute_force_contrastive,
    contrastive_margin,
    cross_entropy,
    mean_similarities,
    total_loss,
)
from hiercon.tensor import Tensor


def batch(f, labels, logits=None):
    f = np.asarray(f, dtype=float)
    if logits is None:
        logits = np.zeros((len(labels), 2))
    return Batch(Tensor(f), np.asarray(labels), Tensor(logits))


def four_sample_geometry(cross_cos):
    # class-0 pair identical, class-1 pair identical, unit vectors at the given cosine
    u = np.array([1.0, 0.0])
    v = np.array([cross_cos, math.sqrt(1 - cross_cos**2)])
    return np.stack([u, u, v, v]), np.array([0, 0, 1, 1])


class TestCrossEntropy:
    def test_uniform_logits(self):
        for label in (0, 1):
            assert cross_entropy(Tensor([[0.0, 0.0]]), [label]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_correct(self):
        assert cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() < 1e-8

    def test_large_logits_stay_finite(self):
        assert np.isfinite(cross_entropy(Tensor([[1000.0, -1000.0]]), [1]).item())

    def test_gradient(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, size=(5, 2)), requires_grad=True)
        y = rng.integers(0, 2, size=5)
        assert tc.finite_difference_check(lambda: cross_entropy(x, y), [x]) <= 1e-6

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(6, 2)), rng.integers(0, 2, size=6)
        p = rng.permutation(6)
        assert cross_entropy(Tensor(x[p]), y[p]).item() == pytest.approx(cross_entropy(Tensor(x), y).item(), abs=1e-14)

    def test_invalid_label(self):
        with pytest.raises(ValueError, match="0 \\(real\\) or 1 \\(fake\\)"):
            cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestMeanSimilarities:
    def test_same_class_identical(self):
        s_pos, s_neg = mean_similarities(batch([[1.0, 2.0], [1.0, 2.0]], [0, 0]), 0)
        assert s_pos == pytest.approx(1.0, abs=1e-7) and s_neg is None

    def test_opposite_class_orthogonal(self):
        s_pos, s_neg = mean_similarities(batch([[1.0, 0.0], [0.0, 1.0]], [0, 1]), 0)
        assert s_pos is None and s_neg == 0.0

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(4, 3))
        labels = np.array([0, 1, 0, 1])
        b = batch(f, labels)
        for i in range(4):
            pos = [tc.cosine_similarity(f[i], f[j]) for j in range(4) if j != i and labels[j] == labels[i]]
            neg = [tc.cosine_similarity(f[i], f[j]) for j in range(4) if labels[j] != labels[i]]
            s_pos, s_neg = mean_similarities(b, i)
            assert abs(s_pos - sum(pos) / len(pos)) <= 1e-12
            assert abs(s_neg - sum(neg) / len(neg)) <= 1e-12

    def test_anchor_included_option(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        s_pos, _ = mean_similarities(batch(f, [0, 0, 1]), 0, include_anchor=True)
        assert s_pos == pytest.approx(0.5, abs=1e-7)

    def test_bad_anchor(self):
        with pytest.raises(IndexError):
            mean_similarities(batch([[1.0]], [0]), 3)


class TestContrastive:
    def test_single_class_batch(self):
        f = np.random.default_rng(0).normal(size=(5, 3))
        assert contrastive_margin(Tensor(f), [1] * 5).item() == 0.0
        assert brute_force_contrastive(f, [1] * 5) == 0.0

    def test_pair_of_opposite_classes_is_skipped(self):
        assert contrastive_margin(Tensor([[1.0, 1.0], [1.0, 1.0]]), [0, 1], 0.5).item() == 0.0

    def test_orthogonal_classes_satisfy_margin(self):
        f, y = four_sample_geometry(0.0)
        assert contrastive_margin(Tensor(f), y, 0.5).item() == pytest.approx(0.0, abs=1e-7)
        assert brute_force_contrastive(f, y, 0.5) == pytest.approx(0.0, abs=1e-7)

    def test_close_classes_violate_margin(self):
        f, y = four_sample_geometry(0.8)
        assert contrastive_margin(Tensor(f), y, 0.5).item() == pytest.approx(0.3, abs=1e-7)
        assert brute_force_contrastive(f, y, 0.5) == pytest.approx(0.3, abs=1e-7)

    def test_zero_margin_all_equal(self):
        f = np.tile([0.3, -1.2, 2.0], (6, 1))
        y = [0, 1, 0, 1, 1, 0]
        assert contrastive_margin(Tensor(f), y, 0.0).item() == 0.0
        assert brute_force_contrastive(f, y, 0.0) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for k in range(200):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(1, 33))
            f = rng.normal(size=(n, d))
            # every tenth batch is single-class
            y = np.full(n, k % 2) if k % 10 == 0 else rng.integers(0, 2, size=n)
            m = float(rng.uniform(0, 1.5))
            got = contrastive_margin(Tensor(f), y, m).item()
            assert abs(got - brute_force_contrastive(f, y, m)) <= 1e-12
            if k % 10 == 0:
                assert got == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            f = rng.normal(size=(8, 5))
            y = rng.integers(0, 2, size=8)
            g = f.copy()
            g[int(rng.integers(8))] *= float(rng.uniform(0.01, 100))
            assert abs(contrastive_margin(Tensor(f), y).item() - contrastive_margin(Tensor(g), y).item()) <= 1e-9

    def test_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n, m = int(rng.integers(2, 12)), float(rng.uniform(0, 2))
            val = contrastive_margin(Tensor(rng.normal(size=(n, 3))), rng.integers(0, 2, size=n), m).item()
            assert 0.0 <= val <= m + 2 + 1e-12

    def test_gradient_away_from_kinks(self):
        rng = np.random.default_rng(6)
        f = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        y = np.array([0, 1, 0, 1, 1, 0])
        assert tc.finite_difference_check(lambda: contrastive_margin(f, y, 1.0), [f]) <= 1e-6


class TestTotal:
    def test_lambda_zero_is_pure_ce(self):
        rng = np.random.default_rng(7)
        b = batch(rng.normal(size=(4, 3)), [0, 1, 0, 1], rng.normal(size=(4, 2)))
        total, ce, con = total_loss(b, LossConfig(lambda_con=0.0))
        assert total.item() == ce
        assert con > 0

    def test_weighted_sum(self):
        rng = np.random.default_rng(8)
        b = batch(rng.normal(size=(4, 3)), [0, 1, 0, 1], rng.normal(size=(4, 2)))
        total, ce, con = total_loss(b, LossConfig(lambda_con=0.1))
        assert total.item() == pytest.approx(ce + 0.1 * con, abs=1e-15)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(margin=-1)
        with pytest.raises(ValueError):
            LossConfig(lambda_con=-0.1)

    def test_batch_rows_checked(self):
        with pytest.raises(tc.ShapeError):
            Batch(Tensor(np.zeros((3, 2))), np.array([0, 1]), Tensor(np.zeros((2, 2))))
