import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpav import (KdConfig, aggregate_arrays, average_soft_labels,
                    cdw_weights, cdw_weights_literal, extract_features,
                    init_backbone, kd_finetune, size_weights)
from fedpav.aggregation import feature_mse

finite_distances = st.lists(
    st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
    min_size=1, max_size=12,
)


class TestSizeWeights:
    def test_values(self):
        np.testing.assert_allclose(size_weights([10, 30, 60]),
                                   [0.1, 0.3, 0.6])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            size_weights([5, 0])


class TestCdwWeights:
    def test_hand_case(self):
        np.testing.assert_allclose(cdw_weights([0.2, 0.3, 0.5]),
                                   [0.2, 0.3, 0.5], rtol=1e-12)
        np.testing.assert_allclose(cdw_weights([1.0, 3.0]), [0.25, 0.75],
                                   rtol=1e-12)

    def test_all_zero_falls_back_to_uniform(self):
        np.testing.assert_allclose(cdw_weights([0.0, 0.0, 0.0, 0.0]),
                                   [0.25] * 4)

    def test_partial_zero_keeps_zero_weight(self):
        w = cdw_weights([0.0, 2.0])
        np.testing.assert_allclose(w, [0.0, 1.0])

    @given(finite_distances)
    @settings(max_examples=200, deadline=None)
    def test_simplex(self, distances):
        w = cdw_weights(distances)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12

    @given(finite_distances,
           st.floats(min_value=1e-3, max_value=1e3, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_scale_invariance(self, distances, scale):
        arr = np.asarray(distances)
        np.testing.assert_allclose(cdw_weights(arr),
                                   cdw_weights(arr * scale),
                                   rtol=1e-9, atol=1e-12)

    @given(finite_distances)
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_distance(self, distances):
        w = cdw_weights(distances)
        order = np.argsort(distances)
        for a, b in zip(order, order[1:]):
            assert w[a] <= w[b] + 1e-12

    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            cdw_weights([0.1, -0.2])
        with pytest.raises(ValueError):
            cdw_weights([np.nan, 0.2])


class TestCdwLiteral:
    def test_formula(self):
        # w_k = m_k / sum(1/m_j); for m = [1, 2]: denom = 1.5
        np.testing.assert_allclose(cdw_weights_literal([1.0, 2.0]),
                                   [1 / 1.5, 2 / 1.5], rtol=1e-12)

    def test_does_not_normalize(self):
        w = cdw_weights_literal([0.5, 0.25])
        assert w.sum() != pytest.approx(1.0)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            cdw_weights_literal([0.0, 1.0])


class TestAggregate:
    def test_hand_average(self):
        arrays = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
        np.testing.assert_allclose(aggregate_arrays(arrays, [0.5, 0.5]),
                                   [0.5, 1.0])

    def test_single_array_identity_is_bitwise(self):
        a = np.random.default_rng(0).standard_normal(50)
        assert np.array_equal(aggregate_arrays([a], [1.0]), a)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        arrays = [rng.standard_normal(20) for _ in range(4)]
        weights = size_weights([3, 5, 2, 10])
        got = aggregate_arrays(arrays, weights)
        want = np.zeros(20)
        for w, a in zip(weights, arrays):
            want += w * a
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            aggregate_arrays([np.zeros(3), np.zeros(4)], [0.5, 0.5])
        with pytest.raises(ValueError):
            aggregate_arrays([np.zeros(3)], [0.5, 0.5])


class TestSoftLabels:
    def test_plain_mean(self):
        mats = [np.full((2, 3), 1.0), np.full((2, 3), 3.0)]
        np.testing.assert_allclose(average_soft_labels(mats),
                                   np.full((2, 3), 2.0))

    def test_rejects_mixed_shapes(self):
        with pytest.raises(ValueError):
            average_soft_labels([np.zeros((2, 3)), np.zeros((3, 2))])


class TestKdFinetune:
    def setup_method(self):
        self.rng = np.random.default_rng(5)
        self.backbone = init_backbone(6, 4, 3)
        self.inputs = self.rng.standard_normal((40, 6))

    def test_perfect_targets_are_a_bitwise_noop(self):
        targets = extract_features(self.backbone, self.inputs)
        out = kd_finetune(self.backbone, self.inputs, targets,
                          KdConfig(lr=0.0005, epochs=3, batch_size=8),
                          seed=1)
        assert np.array_equal(out, self.backbone)

    def test_loss_decreases_on_real_targets(self):
        targets = extract_features(self.backbone, self.inputs)
        targets = targets + 0.3 * self.rng.standard_normal(targets.shape)
        before = feature_mse(self.backbone, self.inputs, targets)
        out = kd_finetune(self.backbone, self.inputs, targets,
                          KdConfig(lr=0.0005, epochs=1, batch_size=8),
                          seed=1)
        after = feature_mse(out, self.inputs, targets)
        assert after < before

    def test_single_step_matches_finite_difference_gradient(self):
        # one full-batch step must move along -lr * dMSE/dparams
        targets = extract_features(self.backbone, self.inputs) + 0.1
        lr = 1e-4
        out = kd_finetune(self.backbone, self.inputs, targets,
                          KdConfig(lr=lr, epochs=1, batch_size=40), seed=0)
        step = (out - self.backbone) / -lr
        h = 1e-6
        for j in self.rng.choice(self.backbone.size, 8, replace=False):
            up = self.backbone.copy()
            up[j] += h
            down = self.backbone.copy()
            down[j] -= h
            fd = (feature_mse(up, self.inputs, targets)
                  - feature_mse(down, self.inputs, targets)) / (2 * h)
            assert step[j] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_deterministic(self):
        targets = extract_features(self.backbone, self.inputs) + 0.2
        kd = KdConfig(lr=0.001, epochs=2, batch_size=7)
        a = kd_finetune(self.backbone, self.inputs, targets, kd, seed=9)
        b = kd_finetune(self.backbone, self.inputs, targets, kd, seed=9)
        assert np.array_equal(a, b)
        c = kd_finetune(self.backbone, self.inputs, targets, kd, seed=10)
        assert not np.array_equal(a, c)

    def test_validates_shapes(self):
        with pytest.raises(ValueError):
            kd_finetune(self.backbone, self.inputs, np.zeros((40, 3)),
                        KdConfig(), seed=0)
        with pytest.raises(ValueError):
            kd_finetune(np.zeros(13), self.inputs, np.zeros((40, 4)),
                        KdConfig(), seed=0)
