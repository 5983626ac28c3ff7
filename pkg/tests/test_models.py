import pytest
import torch
from torch import nn

from fewgen.errors import DimensionError
from fewgen.models import (Discriminator, Generator, _stages_for, build_models,
                           count_parameters, estimate_macs, model_complexity)


def small_pair():
    torch.manual_seed(0)
    return build_models(latent_dim=16, image_size=16, channels=1, base_channels=8)


class TestStages:
    def test_known_sizes(self):
        assert _stages_for(16) == 2
        assert _stages_for(32) == 3
        assert _stages_for(64) == 4
        assert _stages_for(128) == 5

    @pytest.mark.parametrize("bad", [0, 8, 15, 20, 48])
    def test_rejects_non_power_or_small(self, bad):
        with pytest.raises(DimensionError):
            _stages_for(bad)


class TestGenerator:
    def test_output_shape_and_range(self):
        g, _ = small_pair()
        x = g(torch.randn(4, 16))
        assert x.shape == (4, 1, 16, 16)
        assert x.min().item() >= -1.0 and x.max().item() <= 1.0

    def test_range_under_extreme_latents(self):
        g, _ = small_pair()
        x = g(10.0 * torch.ones(2, 16))
        assert x.abs().max().item() <= 1.0

    def test_rejects_wrong_latent_shape(self):
        g, _ = small_pair()
        with pytest.raises(DimensionError):
            g(torch.randn(16))
        with pytest.raises(DimensionError):
            g(torch.randn(2, 17))

    def test_larger_image_sizes(self):
        g = Generator(latent_dim=8, image_size=32, channels=1, base_channels=4)
        assert g(torch.randn(2, 8)).shape == (2, 1, 32, 32)

    def test_build_is_seed_deterministic(self):
        torch.manual_seed(7)
        a = Generator(8, 16, 1, 4)
        torch.manual_seed(7)
        b = Generator(8, 16, 1, 4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestDiscriminator:
    def test_forward_shapes_and_tag(self):
        _, d = small_pair()
        score, stats = d(torch.randn(3, 1, 16, 16), tag="generated")
        assert score.shape == (3,)
        assert stats.mu.shape == (3, 16)
        assert stats.log_var.shape == (3, 16)
        assert stats.tag == "generated"

    def test_rejects_wrong_input(self):
        _, d = small_pair()
        with pytest.raises(DimensionError):
            d(torch.randn(2, 1, 8, 8))
        with pytest.raises(DimensionError):
            d(torch.randn(1, 16, 16))

    def test_encode_matches_forward(self):
        _, d = small_pair()
        d.eval()  # freeze the spectral norm power iteration between calls
        x = torch.randn(2, 1, 16, 16)
        _, stats = d(x)
        enc = d.encode(x)
        assert torch.equal(enc.mu, stats.mu)
        assert torch.equal(enc.log_var, stats.log_var)

    def test_rows_independent(self):
        _, d = small_pair()
        d.eval()
        x = torch.randn(3, 1, 16, 16)
        x[2] = x[0]
        score, stats = d(x)
        assert torch.equal(score[2], score[0])
        assert torch.equal(stats.mu[2], stats.mu[0])

    def test_tap_widths(self):
        d16 = Discriminator(image_size=16, channels=1, base_channels=8, feature_dim=4)
        assert d16.mu_head.in_features == 8 + 16  # both stages tapped
        d32 = Discriminator(image_size=32, channels=1, base_channels=8, feature_dim=4)
        assert d32.mu_head.in_features == 8 + 16 + 32

    def test_posterior_heads_not_spectral_normed(self):
        _, d = small_pair()
        assert not hasattr(d.mu_head, "weight_orig")
        assert not hasattr(d.log_var_head, "weight_orig")
        assert hasattr(d.score_head, "weight_orig")

    def test_spectral_bound_after_power_iterations(self):
        torch.manual_seed(1)
        _, d = small_pair()
        for _ in range(50):  # each train-mode forward runs one power iteration
            d(torch.randn(4, 1, 16, 16))
        d.eval()
        d(torch.randn(1, 1, 16, 16))
        for m in d.modules():
            if hasattr(m, "weight_orig"):
                w = m.weight.reshape(m.weight.shape[0], -1)
                top = torch.linalg.svdvals(w)[0].item()
                assert top <= 1.0 + 1e-2

    def test_feature_grads_reach_trunk(self):
        _, d = small_pair()
        first_conv = d.stages[0][0]
        _, stats = d(torch.randn(2, 1, 16, 16))
        stats.mu.sum().backward()
        assert first_conv.weight_orig.grad.abs().sum().item() > 0.0

    def test_score_grads_reach_trunk(self):
        _, d = small_pair()
        first_conv = d.stages[0][0]
        score, _ = d(torch.randn(2, 1, 16, 16))
        score.sum().backward()
        assert first_conv.weight_orig.grad.abs().sum().item() > 0.0


class TestInit:
    def test_linear_biases_zero_weights_spread(self):
        torch.manual_seed(0)
        _, d = small_pair()
        assert torch.equal(d.mu_head.bias, torch.zeros_like(d.mu_head.bias))
        std = d.mu_head.weight.std().item()
        assert 0.01 < std < 0.03


class TestCounting:
    def test_dense_layer_hand_count(self):
        assert count_parameters(nn.Linear(3, 2)) == 8

    def test_frozen_params_excluded(self):
        layer = nn.Linear(3, 2)
        layer.weight.requires_grad_(False)
        assert count_parameters(layer) == 2

    def test_small_generator_hand_count(self):
        # projection 16->16 (4096) + BN (32) + stage 16->8 (2048) + BN (16)
        # + output 8->1 (128), all convs bias-free
        assert count_parameters(Generator(16, 16, 1, 8)) == 6320

    def test_small_discriminator_hand_count(self):
        # convs 1->8 (128) and 8->16 (2048), score 16->1 over 4x4 (256),
        # two linear heads on the 24-wide tap vector (400 each with bias)
        assert count_parameters(Discriminator(16, 1, 8, 16)) == 3232

    def test_full_scale_parameter_count(self):
        g, d = build_models()
        assert count_parameters(g, d) == 14_321_728

    def test_macs_hand_cases(self):
        conv = nn.Conv2d(1, 2, 3, 1, 1)
        assert estimate_macs(conv, torch.zeros(1, 1, 8, 8)) == 2 * 8 * 8 * 1 * 9
        assert estimate_macs(nn.Linear(5, 3), torch.zeros(1, 5)) == 15

    def test_model_complexity_report(self):
        g, d = small_pair()
        rep = model_complexity(g, d)
        assert rep["total_params"] == rep["generator_params"] + rep["discriminator_params"]
        assert rep["generator_macs"] > 0
        assert rep["discriminator_macs"] > 0


class TestBuildModels:
    def test_feature_dim_defaults_to_latent(self):
        g, d = build_models(latent_dim=16, image_size=16, base_channels=8)
        assert d.feature_dim == g.latent_dim == 16

    def test_feature_dim_override(self):
        _, d = build_models(latent_dim=16, image_size=16, base_channels=8, feature_dim=5)
        assert d.feature_dim == 5
        stats = d.encode(torch.randn(2, 1, 16, 16))
        assert stats.mu.shape == (2, 5)
