import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from models.decor_core import (
    CorrelationMap,
    FeatureMap,
    LossWeights,
    channel_correlation,
    combined_loss,
    decor_loss,
    decor_loss_backward,
    decor_loss_forward,
    decor_loss_multi_layer,
    decor_loss_per_sample,
    decov_penalty,
    gradient_check,
    normalized_softmax,
    ortho_penalty,
)
from utils.exceptions import NumericalError, ShapeMismatchError


def one_hot_channels(channels, size=2):
    data = np.zeros((channels, size, size))
    for i in range(channels):
        data[i].flat[i] = 1.0
    return FeatureMap(data)


def identical_channels(channels, rng):
    base = rng.normal(size=(3, 3))
    return FeatureMap(np.stack([base] * channels))


def opposed_channels(channels, size=2):
    """Channel pairs (v, -v) over orthonormal v: off-diagonal correlations of -1."""
    data = np.zeros((channels, size, size))
    for i in range(0, channels, 2):
        data[i].flat[i // 2] = 1.0
        data[i + 1].flat[i // 2] = -1.0
    return FeatureMap(data)


class TestChannelCorrelation:
    def test_single_channel(self):
        corr = channel_correlation(FeatureMap(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert_array_equal(corr.values, [[30.0]])
        assert_array_equal(corr.row_normalizers, [30.0])

    def test_orthonormal_channels(self):
        corr = channel_correlation(one_hot_channels(2))
        assert_array_equal(corr.values, np.eye(2))
        assert_array_equal(corr.row_normalizers, [1.0, 1.0])

    def test_matches_double_loop(self, rng):
        data = rng.normal(size=(4, 3, 3))
        corr = channel_correlation(FeatureMap(data))
        expected = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                for h in range(3):
                    for w in range(3):
                        expected[i, j] += data[i, h, w] * data[j, h, w]
        assert_allclose(corr.values, expected, rtol=1e-12, atol=1e-12)

    def test_symmetric_with_row_maxima(self, rng):
        corr = channel_correlation(FeatureMap(rng.normal(size=(6, 4, 5))))
        assert_array_equal(corr.values, corr.values.T)
        assert np.all(np.diag(corr.values) >= 0)
        assert np.all(corr.row_normalizers >= np.diag(corr.values))

    def test_non_finite_names_layer(self):
        data = np.ones((2, 2, 2))
        data[1, 0, 0] = np.nan
        with pytest.raises(NumericalError, match="layer 3"):
            channel_correlation(FeatureMap(data, layer_id=3))

    def test_bad_rank_rejected(self):
        with pytest.raises(ShapeMismatchError):
            FeatureMap(np.ones((2, 2)))


class TestNormalizedSoftmax:
    def test_identity_correlation(self):
        prob = normalized_softmax(CorrelationMap(np.eye(2), np.array([1.0, 1.0])))
        assert prob.values[0, 0] == pytest.approx(math.e / (math.e + 1), abs=1e-6)
        assert prob.values[0, 1] == pytest.approx(0.268941, abs=1e-6)

    def test_constant_rows_are_uniform(self):
        for channels in (2, 3, 7):
            values = np.full((channels, channels), 5.0)
            prob = normalized_softmax(CorrelationMap(values, values.max(axis=1)))
            assert_allclose(prob.values, 1.0 / channels, atol=1e-12)

    def test_scaled_row_maximum(self):
        values = np.array([[4.0, 2.0], [2.0, 4.0]])
        prob = normalized_softmax(CorrelationMap(values, values.max(axis=1)))
        assert prob.values[0, 0] == pytest.approx(math.e / (math.e + math.exp(0.5)), abs=1e-6)
        assert prob.values[0, 0] == pytest.approx(0.622459, abs=1e-6)

    def test_rows_sum_to_one(self, rng):
        for _ in range(10):
            corr = channel_correlation(FeatureMap(rng.normal(size=(8, 4, 4))))
            prob = normalized_softmax(corr)
            assert_allclose(prob.values.sum(axis=1), 1.0, atol=1e-9)
            assert np.all((prob.values > 0) & (prob.values < 1))

    def test_zero_channel_falls_back_to_uniform(self, rng):
        data = rng.normal(size=(3, 4, 4))
        data[0] = 0.0
        result = decor_loss(FeatureMap(data))
        assert result.probability_map.degenerate_rows == (0,)
        assert_allclose(result.probability_map.values[0], 1.0 / 3)
        assert np.isfinite(result.loss)
        assert np.all(np.isfinite(result.gradient))

    def test_all_zero_features(self):
        result = decor_loss(FeatureMap(np.zeros((4, 3, 3))))
        assert result.loss == pytest.approx(4 * math.log(4))
        assert_array_equal(result.gradient, 0.0)


class TestDecorLoss:
    @pytest.mark.parametrize("channels", [2, 4])
    def test_identical_channels(self, channels, rng):
        loss = decor_loss_forward(identical_channels(channels, rng)).loss
        assert loss == pytest.approx(channels * math.log(channels), abs=1e-9)

    def test_two_identical_channels_value(self, rng):
        assert decor_loss_forward(identical_channels(2, rng)).loss == pytest.approx(1.386294, abs=1e-6)

    @pytest.mark.parametrize("channels", [2, 4])
    def test_orthogonal_channels(self, channels):
        loss = decor_loss_forward(one_hot_channels(channels)).loss
        expected = channels * math.log((math.e + channels - 1) / math.e)
        assert loss == pytest.approx(expected, abs=1e-9)

    def test_orthogonal_two_channel_value(self):
        assert decor_loss_forward(one_hot_channels(2)).loss == pytest.approx(0.626523, abs=1e-6)

    @pytest.mark.parametrize("channels", [2, 4])
    def test_redundancy_costs_more(self, channels, rng):
        assert decor_loss_forward(identical_channels(channels, rng)).loss > decor_loss_forward(
            one_hot_channels(channels)
        ).loss

    @pytest.mark.parametrize("channels", [2, 4])
    def test_loss_ordering(self, channels, rng):
        identical = decor_loss_forward(identical_channels(channels, rng)).loss
        orthogonal = decor_loss_forward(one_hot_channels(channels)).loss
        opposed = decor_loss_forward(opposed_channels(channels)).loss
        assert identical > orthogonal > opposed

    def test_opposed_two_channel_value(self):
        expected = 2 * math.log(1 + math.exp(-2))
        assert decor_loss_forward(opposed_channels(2)).loss == pytest.approx(expected, abs=1e-9)

    def test_single_channel(self, rng):
        result = decor_loss(FeatureMap(rng.normal(size=(1, 3, 3))))
        assert result.loss == 0.0
        assert_array_equal(result.probability_map.values, [[1.0]])
        assert_array_equal(result.gradient, 0.0)

    def test_loss_nonnegative(self, rng):
        for _ in range(20):
            assert decor_loss_forward(FeatureMap(rng.normal(size=(5, 3, 4)))).loss >= 0.0


class TestGradient:
    def test_matches_finite_differences(self, rng):
        for trial in range(24):
            channels = (2, 4, 8)[trial % 3]
            height, width = rng.integers(3, 8, size=2)
            features = FeatureMap(rng.normal(size=(channels, height, width)))
            assert gradient_check(features) < 1e-6

    def test_eight_by_five_by_five(self, rng):
        assert gradient_check(FeatureMap(rng.normal(size=(8, 5, 5)))) < 1e-6

    @pytest.mark.parametrize("scale", [0.5, 3.0, 100.0])
    def test_scale_invariance(self, scale, rng):
        data = rng.normal(size=(4, 5, 5))
        base = decor_loss(FeatureMap(data))
        scaled = decor_loss(FeatureMap(scale * data))
        assert scaled.loss == pytest.approx(base.loss, abs=1e-9)
        assert_allclose(scaled.probability_map.values, base.probability_map.values, atol=1e-9)
        assert_allclose(scaled.gradient, base.gradient / scale, rtol=1e-8, atol=1e-12)

    def test_backward_rejects_mismatched_maps(self, rng):
        features = FeatureMap(rng.normal(size=(3, 2, 2)))
        other = FeatureMap(rng.normal(size=(4, 2, 2)))
        corr = channel_correlation(other)
        with pytest.raises(ShapeMismatchError):
            decor_loss_backward(features, normalized_softmax(corr), corr)


class TestTorchKernel:
    @pytest.mark.parametrize("mode", ["closed_form", "autograd"])
    def test_agrees_with_reference(self, mode, rng):
        data = rng.normal(size=(3, 4, 5, 5))
        features = torch.tensor(data, requires_grad=True)
        loss, prob = decor_loss_per_sample(features, gradient_mode=mode)
        loss.sum().backward()
        for n in range(3):
            reference = decor_loss(FeatureMap(data[n]))
            assert float(loss[n]) == pytest.approx(reference.loss, abs=1e-10)
            assert_allclose(prob[n].numpy(), reference.probability_map.values, atol=1e-12)
            assert_allclose(features.grad[n].numpy(), reference.gradient, rtol=1e-9, atol=1e-12)

    def test_degenerate_rows_stay_finite(self):
        features = torch.zeros(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        loss, prob = decor_loss_per_sample(features)
        loss.sum().backward()
        assert torch.allclose(prob, torch.full_like(prob, 1.0 / 3))
        assert torch.all(torch.isfinite(features.grad))

    def test_rejects_unbatched_input(self):
        with pytest.raises(ShapeMismatchError):
            decor_loss_per_sample(torch.ones(3, 4, 4))


class TestMultiLayer:
    def test_single_channel_layers_sum_to_zero(self, rng):
        taps = [FeatureMap(rng.normal(size=(1, 4, 4)), layer_id=i) for i in range(5)]
        result = decor_loss_multi_layer(taps, LossWeights())
        assert float(result.total) == 0.0

    def test_layer_reductions(self, rng):
        taps = [torch.tensor(rng.normal(size=(1, c, 4, 4))) for c in (2, 6)]
        mean = decor_loss_multi_layer(taps, LossWeights(layer_reduction="mean"))
        total = decor_loss_multi_layer(taps, LossWeights(layer_reduction="sum"))
        assert float(mean.total) == pytest.approx(np.mean(mean.layer_losses), rel=1e-12)
        assert float(total.total) == pytest.approx(np.sum(total.layer_losses), rel=1e-12)
        assert float(total.total) == pytest.approx(2 * float(mean.total), rel=1e-12)

    def test_batch_mean_of_identical_samples(self, rng):
        sample = rng.normal(size=(4, 3, 3))
        single = decor_loss_multi_layer([FeatureMap(sample)], LossWeights())
        batch = decor_loss_multi_layer([torch.tensor(np.stack([sample, sample]))], LossWeights())
        assert float(batch.total) == pytest.approx(float(single.total), abs=1e-12)

    def test_layer_weights_scale_terms(self, rng):
        taps = [torch.tensor(rng.normal(size=(2, 3, 4, 4))) for _ in range(2)]
        plain = decor_loss_multi_layer(taps, LossWeights(layer_reduction="sum"))
        weighted = decor_loss_multi_layer(taps, LossWeights(layer_reduction="sum", layer_weights=(2.0, 0.0)))
        assert float(weighted.total) == pytest.approx(2 * plain.layer_losses[0], rel=1e-12)

    def test_layer_weight_count_checked(self, rng):
        taps = [torch.tensor(rng.normal(size=(1, 3, 4, 4)))]
        with pytest.raises(ShapeMismatchError):
            decor_loss_multi_layer(taps, LossWeights(layer_weights=(1.0, 1.0)))

    def test_empty_taps_rejected(self):
        with pytest.raises(ValueError):
            decor_loss_multi_layer([], LossWeights())


class TestPenalties:
    def test_decov_identical_channels(self, rng):
        assert decov_penalty(identical_channels(2, rng)) > 0

    def test_decov_uncorrelated_channels(self):
        features = FeatureMap(np.array([[[1.0, -1.0]], [[1.0, 1.0]]]))
        assert decov_penalty(features) == pytest.approx(0.0, abs=1e-15)

    def test_decov_single_channel(self, rng):
        assert decov_penalty(FeatureMap(rng.normal(size=(1, 3, 3)))) == 0.0

    def test_ortho_identity(self):
        assert float(ortho_penalty(np.eye(3))) == pytest.approx(0.0, abs=1e-15)

    def test_ortho_rotation_rows(self):
        theta = 0.3
        w = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        assert float(ortho_penalty(w)) == pytest.approx(0.0, abs=1e-12)

    def test_ortho_hand_computed(self):
        assert float(ortho_penalty(np.array([[1.0, 0.0], [1.0, 0.0]]))) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_ortho_conv_kernels_sum(self):
        kernels = [torch.eye(2).reshape(2, 2, 1, 1), torch.tensor([[1.0, 0.0], [1.0, 0.0]])]
        assert float(ortho_penalty(kernels)) == pytest.approx(math.sqrt(2), abs=1e-6)


class TestCombinedLoss:
    def test_hand_computed_uniform_prediction(self):
        logits = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        mask = torch.tensor([[[[1.0, 0.0], [1.0, 0.0]]]], dtype=torch.float64)
        parts = combined_loss(logits, mask, [], LossWeights(lambda_decor=0.0))
        dice = 1 - (2.0 + 1e-5) / (4.0 + 1e-5)
        assert parts.ce == pytest.approx(math.log(2), abs=1e-12)
        assert parts.dice == pytest.approx(dice, abs=1e-12)
        assert float(parts.total) == pytest.approx(0.5 * math.log(2) + 0.5 * dice, abs=1e-12)

    def test_perfect_prediction(self):
        mask = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=torch.float64)
        logits = (mask * 2 - 1) * 40.0
        parts = combined_loss(logits, mask, [], LossWeights(lambda_decor=0.0))
        assert float(parts.total) == pytest.approx(0.0, abs=1e-6)

    def test_zero_lambda_is_segmentation_only(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
        mask = torch.tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        taps = [torch.tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)]
        parts = combined_loss(logits, mask, taps, LossWeights(lambda_decor=0.0))
        assert float(parts.total) == pytest.approx(0.5 * parts.ce + 0.5 * parts.dice, abs=1e-12)
        assert parts.decor > 0
        assert not parts.total.requires_grad

    def test_decor_term_added(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
        mask = torch.tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        taps = [torch.tensor(rng.normal(size=(2, 3, 2, 2)))]
        parts = combined_loss(logits, mask, taps, LossWeights(lambda_decor=0.01))
        expected = 0.5 * parts.ce + 0.5 * parts.dice + 0.01 * parts.decor
        assert float(parts.total) == pytest.approx(expected, abs=1e-12)
        assert len(parts.layer_losses) == 1

    def test_gradient_modes_agree(self, rng):
        data = rng.normal(size=(2, 4, 4, 4))
        logits = torch.tensor(rng.normal(size=(2, 1, 4, 4)))
        mask = torch.tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
        grads = []
        for mode in ("closed_form", "autograd"):
            tap = torch.tensor(data, requires_grad=True)
            combined_loss(logits, mask, [tap], LossWeights(gradient_mode=mode)).total.backward()
            grads.append(tap.grad)
        torch.testing.assert_close(grads[0], grads[1], rtol=1e-9, atol=1e-12)

    def test_penalty_choices(self, rng):
        logits = torch.tensor(rng.normal(size=(1, 1, 4, 4)))
        mask = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        taps = [torch.tensor(rng.normal(size=(1, 3, 2, 2)))]
        kernels = [torch.tensor(rng.normal(size=(3, 1, 3, 3)))]
        none = combined_loss(logits, mask, taps, LossWeights(penalty="none"))
        decov = combined_loss(logits, mask, taps, LossWeights(penalty="decov", lambda_decov=1.0))
        ortho = combined_loss(logits, mask, taps, LossWeights(penalty="ortho", lambda_ortho=1.0), kernels)
        assert none.decor == 0.0
        assert float(decov.total) == pytest.approx(float(none.total) + decov.decor, abs=1e-12)
        assert float(ortho.total) == pytest.approx(float(none.total) + ortho.decor, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            combined_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3), [], LossWeights())

    def test_non_binary_mask(self):
        with pytest.raises(ValueError):
            combined_loss(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5), [], LossWeights())

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_decor=-0.1)
