import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewgen.errors import DimensionError, NumericError
from fewgen.latent import (BinaryMask, FeatureStats, LatentCode,
                           channel_interpolate, interpolate_stats,
                           reparameterize, sample_derangement, sample_mask,
                           sample_masks)


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


class TestFeatureStats:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            FeatureStats(torch.zeros(3), torch.zeros(4))

    def test_bad_tag_rejected(self):
        with pytest.raises(ValueError):
            FeatureStats(torch.zeros(3), torch.zeros(3), tag="fake")

    def test_sigma_is_exp_half_log_var(self):
        s = FeatureStats(torch.zeros(1), torch.tensor([2.0 * math.log(3.0)]))
        assert torch.allclose(s.sigma, torch.tensor([3.0]))

    def test_validate_finite(self):
        s = FeatureStats(torch.tensor([float("inf")]), torch.zeros(1))
        with pytest.raises(NumericError):
            s.validate_finite()

    def test_dim(self):
        assert FeatureStats(torch.zeros(2, 5), torch.zeros(2, 5)).dim == 5


class TestBinaryMask:
    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            BinaryMask(torch.tensor([0.0, 0.5]))

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            BinaryMask(torch.zeros(0))

    def test_bool_input_accepted(self):
        m = BinaryMask(torch.tensor([True, False]))
        assert m.bits.tolist() == [1.0, 0.0]


class TestSampleMask:
    def test_degenerate_probabilities(self):
        assert sample_mask(4, 1.0, rng()).bits.tolist() == [1, 1, 1, 1]
        assert sample_mask(4, 0.0, rng()).bits.tolist() == [0, 0, 0, 0]

    def test_zero_dim_rejected(self):
        with pytest.raises(DimensionError):
            sample_mask(0, 0.5, rng())

    def test_bad_probability_rejected(self):
        with pytest.raises(ValueError):
            sample_mask(4, 1.5, rng())

    def test_ones_fraction_concentrates(self):
        bits = sample_mask(10000, 0.5, rng(3)).bits
        assert 0.47 <= bits.mean().item() <= 0.53

    def test_reproducible(self):
        assert torch.equal(sample_mask(64, 0.5, rng(7)).bits,
                           sample_mask(64, 0.5, rng(7)).bits)

    def test_batched_shape_and_values(self):
        m = sample_masks(5, 8, 0.5, rng())
        assert m.shape == (5, 8)
        assert (((m == 0) | (m == 1)).all()).item()

    def test_batched_empty_rejected(self):
        with pytest.raises(DimensionError):
            sample_masks(0, 4, 0.5, rng())


class TestChannelInterpolate:
    def test_elementwise_selection(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0])
        y = torch.tensor([5.0, 6.0, 7.0, 8.0])
        k = BinaryMask(torch.tensor([1.0, 0.0, 1.0, 0.0]))
        assert channel_interpolate(x, y, k).tolist() == [1.0, 6.0, 3.0, 8.0]

    def test_all_ones_is_identity(self):
        x, y = torch.randn(6), torch.randn(6)
        out = channel_interpolate(x, y, torch.ones(6))
        assert torch.equal(out, x)

    def test_equal_inputs_idempotent(self):
        x = torch.randn(6)
        k = sample_mask(6, 0.5, rng()).bits
        assert torch.equal(channel_interpolate(x, x, k), x)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            channel_interpolate(torch.zeros(3), torch.zeros(4), torch.zeros(3))

    def test_projection(self):
        # mixing twice with the same mask and same second source changes nothing
        x, y = torch.randn(8), torch.randn(8)
        k = sample_mask(8, 0.5, rng(5)).bits
        once = channel_interpolate(x, y, k)
        assert torch.equal(channel_interpolate(once, y, k), once)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=32), st.integers(min_value=0, max_value=10_000))
    def test_complementarity(self, d, seed):
        g = rng(seed)
        x = torch.randn(d, generator=g)
        y = torch.randn(d, generator=g)
        k = sample_mask(d, 0.5, g).bits
        forward = channel_interpolate(x, y, k) + channel_interpolate(y, x, k)
        assert torch.equal(forward, x + y)


class TestInterpolateStats:
    def test_tags_enforced(self):
        a = FeatureStats(torch.zeros(2), torch.zeros(2), tag="mixed")
        b = FeatureStats(torch.zeros(2), torch.zeros(2))
        with pytest.raises(ValueError):
            interpolate_stats(a, b, torch.ones(2))

    def test_result_tagged_mixed(self):
        a = FeatureStats(torch.zeros(2), torch.zeros(2))
        out = interpolate_stats(a, a, torch.ones(2))
        assert out.tag == "mixed"

    def test_shared_mask_selects_pairs(self):
        a = FeatureStats(torch.tensor([0.0, 0.0]), torch.tensor([1.0, 1.0]))
        b = FeatureStats(torch.tensor([2.0, 4.0]), torch.tensor([3.0, 5.0]))
        out = interpolate_stats(a, b, torch.tensor([1.0, 0.0]))
        assert out.mu.tolist() == [0.0, 4.0]
        assert out.log_var.tolist() == [1.0, 5.0]

    def test_all_zero_mask_returns_second(self):
        a = FeatureStats(torch.randn(4), torch.randn(4))
        b = FeatureStats(torch.randn(4), torch.randn(4))
        out = interpolate_stats(a, b, torch.zeros(4))
        assert torch.equal(out.mu, b.mu) and torch.equal(out.log_var, b.log_var)

    def test_dim_mismatch(self):
        a = FeatureStats(torch.zeros(2), torch.zeros(2))
        b = FeatureStats(torch.zeros(3), torch.zeros(3))
        with pytest.raises(DimensionError):
            interpolate_stats(a, b, torch.ones(2))


class TestReparameterize:
    def test_zero_eps_returns_mu(self):
        s = FeatureStats(torch.tensor([1.0, -2.0]), torch.randn(2))
        code = reparameterize(s, eps=torch.zeros(2))
        assert torch.equal(code.z, s.mu)

    def test_standard_normal_passthrough(self):
        s = FeatureStats(torch.zeros(3), torch.zeros(3))
        e = torch.tensor([0.5, -1.0, 2.0])
        assert torch.equal(reparameterize(s, eps=e).z, e)

    def test_sigma_scaling(self):
        s = FeatureStats(torch.tensor([1.0]), torch.tensor([2.0 * math.log(3.0)]))
        code = reparameterize(s, eps=torch.tensor([2.0]))
        assert torch.allclose(code.z, torch.tensor([7.0]))

    def test_source_follows_tag(self):
        mixed = FeatureStats(torch.zeros(2), torch.zeros(2), tag="mixed")
        assert reparameterize(mixed, eps=torch.zeros(2)).source == "mixed"

    def test_generated_tag_rejected(self):
        s = FeatureStats(torch.zeros(2), torch.zeros(2), tag="generated")
        with pytest.raises(ValueError):
            reparameterize(s, eps=torch.zeros(2))

    def test_needs_eps_or_rng(self):
        s = FeatureStats(torch.zeros(2), torch.zeros(2))
        with pytest.raises(ValueError):
            reparameterize(s)

    def test_eps_shape_mismatch(self):
        s = FeatureStats(torch.zeros(2), torch.zeros(2))
        with pytest.raises(DimensionError):
            reparameterize(s, eps=torch.zeros(3))

    def test_empirical_moments(self):
        mu = torch.tensor([0.5, -1.0])
        lv = torch.tensor([0.0, math.log(4.0)])
        s = FeatureStats(mu.expand(100_000, 2), lv.expand(100_000, 2))
        z = reparameterize(s, rng=rng(11)).z
        sigma = torch.tensor([1.0, 2.0])
        se_mean = sigma / math.sqrt(100_000)
        se_std = sigma * math.sqrt(0.5 / 100_000)
        assert ((z.mean(0) - mu).abs() <= 3 * se_mean).all()
        assert ((z.std(0) - sigma).abs() <= 4 * se_std).all()


class TestLatentCode:
    def test_bad_source(self):
        with pytest.raises(ValueError):
            LatentCode(torch.zeros(2), source="generated")

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            LatentCode(torch.tensor([float("nan")]))


class TestDerangement:
    def test_no_fixed_points_and_permutation(self):
        for seed in range(40):
            perm = sample_derangement(6, rng(seed))
            assert (perm != torch.arange(6)).all()
            assert torch.equal(perm.sort().values, torch.arange(6))

    def test_n2_swaps(self):
        assert sample_derangement(2, rng()).tolist() == [1, 0]

    def test_too_small(self):
        with pytest.raises(DimensionError):
            sample_derangement(1, rng())

    def test_reproducible(self):
        assert torch.equal(sample_derangement(9, rng(4)), sample_derangement(9, rng(4)))
