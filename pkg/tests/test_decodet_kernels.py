"""
Unit tests for decodet_kernels.py: depth prior, kernel generation and
depth-conditioned modulation.
"""

import math

import numpy as np
import pytest

from decodet_kernels import (
    DckConfig,
    DckWeights,
    delta_kernel_bias,
    dck_backward,
    dck_forward,
    dck_generate,
    dck_generate_backward,
    dck_modulate,
    dck_modulate_backward,
    group_of_channel,
    init_dck_weights,
    init_msdp_params,
    msdp_backward,
    msdp_forward,
)
from tensor_core import BN_EPS, RunningStats, gradcheck


def _weights(config, seed=0, expand_scale=1.0):
    rng = np.random.default_rng(seed)
    return DckWeights(
        reduce=rng.standard_normal((config.hidden, config.channels)),
        norm_gamma=1.0 + 0.2 * rng.standard_normal(config.hidden),
        norm_beta=0.2 * rng.standard_normal(config.hidden),
        expand=expand_scale * rng.standard_normal((config.kernel_numel, config.hidden)),
        expand_bias=rng.standard_normal(config.kernel_numel),
    )


class TestDckConfig:
    """Tests for DckConfig validation and channel grouping."""

    def test_defaults_validate(self):
        """The shipped 7x7, G=16, r=16 setting is valid for C=16."""
        DckConfig().validate()

    def test_even_kernel(self):
        """Even kernel sizes are rejected."""
        with pytest.raises(ValueError, match="odd"):
            DckConfig(kernel_size=4).validate()

    def test_groups_must_divide_channels(self):
        """G must divide C."""
        with pytest.raises(ValueError, match="divisible"):
            DckConfig(groups=3, channels=16).validate()

    def test_reduction_too_large(self):
        """C / r must leave at least one bottleneck channel."""
        with pytest.raises(ValueError, match="bottleneck"):
            DckConfig(reduction=32, channels=16).validate()

    def test_group_assignment(self):
        """Channels map to contiguous groups, ceil(c * G / C) when counted from 1."""
        groups = group_of_channel(16, 4)
        assert list(groups) == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4
        for c in range(16):
            assert groups[c] + 1 == math.ceil((c + 1) * 4 / 16)


class TestMsdp:
    """Tests for msdp_forward and its backward."""

    def test_zero_input_gives_zero_maps(self):
        """Zero features and zero biases propagate to zero depth maps."""
        params = init_msdp_params([3, 4], channels=4, num_convs=2, rng=np.random.default_rng(0))
        features, maps = msdp_forward({3: np.zeros((4, 8, 8)), 4: np.zeros((4, 4, 4))}, params)
        assert not maps[3].any() and not maps[4].any()
        assert not features[3].any()

    def test_shapes(self):
        """C=4, 32x32, M=3 gives a 4x32x32 depth feature and a 1x32x32 map."""
        params = init_msdp_params([3], channels=4, num_convs=3, rng=np.random.default_rng(1))
        features, maps = msdp_forward({3: np.random.default_rng(2).standard_normal((4, 32, 32))}, params)
        assert features[3].shape == (4, 32, 32)
        assert maps[3].shape == (1, 32, 32)

    def test_levels_keep_their_own_weights(self):
        """Each level is processed with its own parameters."""
        params = init_msdp_params([3, 4], channels=2, num_convs=1, rng=np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((2, 8, 8))
        _, maps = msdp_forward({3: x, 4: x}, params)
        assert not np.allclose(maps[3], maps[4])

    def test_unknown_level(self):
        """A pyramid level without parameters is rejected."""
        params = init_msdp_params([3], channels=2, num_convs=1, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="level 5"):
            msdp_forward({5: np.zeros((2, 4, 4))}, params)

    def test_needs_at_least_one_conv(self):
        """M = 0 is rejected."""
        with pytest.raises(ValueError, match="M >= 1"):
            init_msdp_params([3], channels=2, num_convs=0, rng=np.random.default_rng(0))

    def test_update_stats_only_when_asked(self):
        """Running statistics move only with update_stats."""
        params = init_msdp_params([3], channels=2, num_convs=1, rng=np.random.default_rng(0))
        x = {3: 3.0 + np.random.default_rng(1).standard_normal((2, 8, 8))}
        msdp_forward(x, params)
        np.testing.assert_array_equal(params.levels[3].running[0].mean, 0.0)
        msdp_forward(x, params, update_stats=True)
        assert np.any(params.levels[3].running[0].mean != 0.0)

    def test_backward_gradient_shapes(self):
        """Gradients come back per level with parameter shapes."""
        params = init_msdp_params([3], channels=2, num_convs=2, rng=np.random.default_rng(0))
        x = {3: np.random.default_rng(1).standard_normal((2, 8, 8))}
        grad_x, grads = msdp_backward({3: None}, {3: np.ones((1, 8, 8))}, x, params)
        assert grad_x[3].shape == (2, 8, 8)
        assert grads.levels[3].conv_weights[1].shape == (2, 2, 3, 3)
        assert grads.levels[3].head_weight.shape == (1, 2, 1, 1)

    def test_gradcheck(self):
        """Backward matches finite differences on a C=2, 8x8 instance."""
        report = gradcheck("msdp_forward", tolerance=1e-5)
        assert report.passed, report.worst


class TestDckGenerate:
    """Tests for dck_generate."""

    def test_zero_expand_gives_zero_kernels(self):
        """W2 = 0 with zero bias gives all-zero kernels."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = _weights(config)
        weights.expand = np.zeros_like(weights.expand)
        weights.expand_bias = np.zeros_like(weights.expand_bias)
        kernels = dck_generate(np.random.default_rng(1).standard_normal((4, 5, 5)), weights, config)
        assert kernels.shape == (5, 5, 3, 3, 2)
        assert not kernels.any()

    def test_constant_feature_gives_identical_kernels(self):
        """A position-independent depth feature gives the same kernel everywhere."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        depth = np.broadcast_to(np.array([0.3, -1.2, 0.7, 2.0])[:, None, None], (4, 6, 6)).copy()
        kernels = dck_generate(depth, _weights(config), config)
        np.testing.assert_allclose(kernels, np.broadcast_to(kernels[0, 0], kernels.shape), atol=1e-12)

    def test_hand_computed_kernel(self):
        """C=4, r=2, K=3, G=1 on a 1x1 map equals W2 . relu(norm(W1 . D))."""
        config = DckConfig(kernel_size=3, groups=1, reduction=2, channels=4)
        weights = DckWeights(
            reduce=np.array([[1.0, 0.0, 2.0, 0.0], [0.0, -1.0, 0.0, 1.0]]),
            norm_gamma=np.array([1.0, 2.0]),
            norm_beta=np.array([0.5, -0.5]),
            expand=np.arange(18.0).reshape(9, 2) / 10.0,
        )
        d = np.array([1.0, 2.0, 3.0, 1.0])
        stats = RunningStats(mean=np.array([1.0, 0.0]), var=np.array([4.0, 1.0]))
        kernels = dck_generate(d[:, None, None], weights, config, "running", stats)

        hidden = weights.reduce @ d                       # [7, -1]
        normed = (hidden - stats.mean) / np.sqrt(stats.var + BN_EPS)
        activated = np.maximum(weights.norm_gamma * normed + weights.norm_beta, 0.0)
        expected = weights.expand @ activated
        np.testing.assert_allclose(kernels.reshape(-1), expected, atol=1e-12)
        assert activated[1] == 0.0

    def test_wrong_expand_rows(self):
        """W2 must have K*K*G rows."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = _weights(config)
        weights.expand = np.zeros((9, 2))
        with pytest.raises(ValueError, match=r"K\*K\*G"):
            dck_generate(np.zeros((4, 2, 2)), weights, config)

    def test_untrained_generator_is_identity(self):
        """Freshly initialised weights with zero expand produce delta kernels."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = init_dck_weights(config, np.random.default_rng(0), identity_start=True)
        weights.expand = np.zeros_like(weights.expand)
        features = np.random.default_rng(1).standard_normal((4, 5, 5))
        out = dck_forward(features, np.random.default_rng(2).standard_normal((4, 5, 5)), weights, config)
        np.testing.assert_allclose(out, features, atol=1e-12)
        assert delta_kernel_bias(config).sum() == config.groups


    def test_default_init_has_no_offset(self):
        """Without an identity start the generator is the bare bottleneck."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = init_dck_weights(config, np.random.default_rng(0))
        assert weights.expand_bias is None
        weights.expand = np.zeros_like(weights.expand)
        kernels = dck_generate(np.random.default_rng(1).standard_normal((4, 5, 5)), weights, config)
        assert not kernels.any()

    def test_offset_is_added_to_every_kernel(self):
        """An expand bias shifts every position's kernel by the same amount."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = _weights(config)
        depth = np.random.default_rng(3).standard_normal((4, 5, 5))
        with_bias = dck_generate(depth, weights, config)
        weights.expand_bias = None
        without = dck_generate(depth, weights, config)
        shift = (with_bias - without).reshape(25, -1)
        np.testing.assert_allclose(shift, np.broadcast_to(_weights(config).expand_bias, shift.shape), atol=1e-12)

    def test_backward_without_offset(self):
        """No expand bias means no expand-bias gradient."""
        config = DckConfig(kernel_size=3, groups=2, reduction=2, channels=4)
        weights = _weights(config)
        weights.expand_bias = None
        depth = np.random.default_rng(3).standard_normal((4, 5, 5))
        _, grads = dck_generate_backward(np.ones((5, 5, 3, 3, 2)), depth, weights, config)
        assert grads.expand_bias is None
        assert grads.expand.shape == weights.expand.shape


class TestDckModulate:
    """Tests for dck_modulate."""

    def test_delta_kernels_are_identity(self):
        """Centered delta kernels reproduce the input."""
        config = DckConfig(kernel_size=5, groups=2, reduction=1, channels=4)
        kernels = np.zeros((6, 7, 5, 5, 2))
        kernels[:, :, 2, 2, :] = 1.0
        features = np.random.default_rng(0).standard_normal((4, 6, 7))
        np.testing.assert_allclose(dck_modulate(features, kernels, config), features, atol=1e-15)

    def test_zero_kernels(self):
        """All-zero kernels give a zero output."""
        config = DckConfig(kernel_size=3, groups=1, reduction=1, channels=2)
        out = dck_modulate(np.ones((2, 4, 4)), np.zeros((4, 4, 3, 3, 1)), config)
        assert not out.any()

    def test_all_ones(self):
        """C=1, 3x3 ones with ones kernels: center 9, corners 4."""
        config = DckConfig(kernel_size=3, groups=1, reduction=1, channels=1)
        out = dck_modulate(np.ones((1, 3, 3)), np.ones((3, 3, 3, 3, 1)), config)
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == out[0, 2, 2] == 4.0

    def test_kernels_vary_by_position(self):
        """Each position uses its own kernel."""
        config = DckConfig(kernel_size=1, groups=1, reduction=1, channels=1)
        kernels = np.arange(1.0, 5.0).reshape(2, 2, 1, 1, 1)
        out = dck_modulate(np.ones((1, 2, 2)), kernels, config)
        np.testing.assert_array_equal(out[0], [[1.0, 2.0], [3.0, 4.0]])

    def test_group_isolation(self):
        """Changing one group's kernels leaves other groups' channels unchanged."""
        config = DckConfig(kernel_size=3, groups=2, reduction=1, channels=4)
        rng = np.random.default_rng(3)
        features = rng.standard_normal((4, 5, 5))
        kernels = rng.standard_normal((5, 5, 3, 3, 2))
        before = dck_modulate(features, kernels, config)
        kernels[..., 1] += rng.standard_normal((5, 5, 3, 3))
        after = dck_modulate(features, kernels, config)
        np.testing.assert_array_equal(before[:2], after[:2])
        assert not np.allclose(before[2:], after[2:])

    def test_linear_in_features(self):
        """Superposition holds for fixed kernels."""
        config = DckConfig(kernel_size=3, groups=2, reduction=1, channels=4)
        rng = np.random.default_rng(4)
        kernels = rng.standard_normal((6, 6, 3, 3, 2))
        x, y = rng.standard_normal((2, 4, 6, 6))
        lhs = dck_modulate(2.0 * x + 3.0 * y, kernels, config)
        rhs = 2.0 * dck_modulate(x, kernels, config) + 3.0 * dck_modulate(y, kernels, config)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_resolution_mismatch(self):
        """Kernel field and features must share H and W."""
        config = DckConfig(kernel_size=3, groups=1, reduction=1, channels=1)
        with pytest.raises(ValueError, match="resolution"):
            dck_modulate(np.ones((1, 4, 4)), np.ones((3, 3, 3, 3, 1)), config)


class TestDckBackward:
    """Tests for dck_modulate_backward and dck_backward."""

    def test_zero_cotangent(self):
        """Zero grad_out gives zero gradients everywhere."""
        config = DckConfig(kernel_size=3, groups=1, reduction=1, channels=2)
        rng = np.random.default_rng(0)
        grads = dck_backward(
            np.zeros((2, 4, 4)), rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4)), _weights(config), config
        )
        assert not grads.features.any()
        assert not grads.depth_feature.any()
        for name in ("reduce", "norm_gamma", "norm_beta", "expand", "expand_bias"):
            assert not getattr(grads.weights, name).any()

    def test_fixed_kernels_feature_gradient(self):
        """With kernels held constant the feature gradient matches finite differences."""
        config = DckConfig(kernel_size=3, groups=2, reduction=1, channels=4)
        rng = np.random.default_rng(1)
        features = rng.standard_normal((4, 4, 4))
        kernels = rng.standard_normal((4, 4, 3, 3, 2))
        cot = rng.standard_normal((4, 4, 4))
        grad, _ = dck_modulate_backward(cot, features, kernels, config)
        step = 1e-5
        for idx in np.ndindex(features.shape):
            plus, minus = features.copy(), features.copy()
            plus[idx] += step
            minus[idx] -= step
            fd = (np.sum(dck_modulate(plus, kernels, config) * cot) - np.sum(dck_modulate(minus, kernels, config) * cot)) / (2 * step)
            assert abs(grad[idx] - fd) <= 1e-6 * max(abs(fd), abs(grad[idx]), 1e-8) + 1e-9

    def test_kernel_gradient_sums_group_channels(self):
        """Kernel gradients collect every channel of the group."""
        config = DckConfig(kernel_size=1, groups=1, reduction=1, channels=2)
        features = np.stack([np.full((2, 2), 2.0), np.full((2, 2), 3.0)])
        _, grad_kernels = dck_modulate_backward(np.ones((2, 2, 2)), features, np.ones((2, 2, 1, 1, 1)), config)
        np.testing.assert_array_equal(grad_kernels, np.full((2, 2, 1, 1, 1), 5.0))

    def test_joint_gradcheck(self):
        """Joint backward on C=2, G=1, K=3, 4x4 matches finite differences."""
        report = gradcheck("dck", tolerance=1e-5)
        assert report.passed, report.worst

    def test_grouped_kernel_gradient(self):
        """With two groups the kernel gradient matches finite differences."""
        config = DckConfig(kernel_size=3, groups=2, reduction=1, channels=4)
        rng = np.random.default_rng(5)
        features = rng.standard_normal((4, 3, 3))
        kernels = rng.standard_normal((3, 3, 3, 3, 2))
        cot = rng.standard_normal((4, 3, 3))
        _, grad = dck_modulate_backward(cot, features, kernels, config)
        step = 1e-5
        for idx in np.ndindex(kernels.shape):
            plus, minus = kernels.copy(), kernels.copy()
            plus[idx] += step
            minus[idx] -= step
            fd = (np.sum(dck_modulate(features, plus, config) * cot) - np.sum(dck_modulate(features, minus, config) * cot)) / (2 * step)
            assert abs(grad[idx] - fd) <= 1e-6 * max(abs(fd), abs(grad[idx]), 1e-8) + 1e-9

    def test_backward_leaves_running_stats(self):
        """Batch-mode backward never touches running statistics."""
        config = DckConfig(kernel_size=3, groups=1, reduction=1, channels=2)
        rng = np.random.default_rng(2)
        stats = RunningStats.fresh(config.hidden)
        dck_backward(
            np.ones((2, 4, 4)), rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4)),
            _weights(config), config, "batch", stats,
        )
        np.testing.assert_array_equal(stats.mean, 0.0)
        np.testing.assert_array_equal(stats.var, 1.0)
