import pytest
import torch

from fewgen.gradcheck import (ALL_LOSSES, _instance, _margin, check_gradients,
                              finite_diff_grads, run_suite)


class TestFiniteDiff:
    def test_quadratic_gradient(self):
        x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        (g,) = finite_diff_grads(lambda t: (t ** 2).sum(), [x])
        assert torch.allclose(g, 2 * x, atol=1e-8)

    def test_inputs_restored(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        finite_diff_grads(lambda t: t.sum(), [x])
        assert x.tolist() == [1.0, 2.0]

    def test_multiple_tensors(self):
        a = torch.tensor([2.0], dtype=torch.float64)
        b = torch.tensor([3.0], dtype=torch.float64)
        ga, gb = finite_diff_grads(lambda u, v: (u * v).sum(), [a, b])
        assert ga.item() == pytest.approx(3.0, abs=1e-8)
        assert gb.item() == pytest.approx(2.0, abs=1e-8)


class TestCheckGradients:
    def test_smooth_function_tiny_error(self):
        x = torch.randn(4, dtype=torch.float64)
        err = check_gradients(lambda t: (t ** 3).sum(), [x])
        assert err < 1e-6

    def test_detects_detached_branch(self):
        # a deliberately wrong gradient path: half the computation detached
        def broken(t):
            return (t ** 2).sum() + (t.detach() * t).sum()

        x = torch.randn(4, dtype=torch.float64).abs() + 0.5
        err = check_gradients(broken, [x])
        assert err > 0.1

    def test_unused_input_counts_as_zero_grad(self):
        a = torch.randn(3, dtype=torch.float64)
        b = torch.randn(3, dtype=torch.float64)
        err = check_gradients(lambda u, v: (u ** 2).sum(), [a, b])
        assert err < 1e-6


class TestMargin:
    def test_small_values_pushed_out(self):
        x = torch.tensor([0.01, -0.01, 0.0, 0.5], dtype=torch.float64)
        out = _margin(x, lo=0.05)
        assert out.abs().min().item() >= 0.05
        assert out[3].item() == 0.5

    def test_sign_preserved(self):
        out = _margin(torch.tensor([-0.01], dtype=torch.float64), lo=0.05)
        assert out.item() == -0.05


class TestSuite:
    def test_every_loss_has_an_instance_builder(self):
        rng = torch.Generator().manual_seed(0)
        for name in ALL_LOSSES:
            fn, tensors = _instance(name, rng)
            val = fn(*tensors)
            assert torch.isfinite(val), name

    def test_unknown_name_rejected(self):
        with pytest.raises(KeyError):
            _instance("hinge_loss", torch.Generator())

    def test_small_suite_passes(self):
        reports = run_suite(instances=3, seed=0)
        assert [r.name for r in reports] == list(ALL_LOSSES)
        for r in reports:
            assert r.passed, (r.name, r.max_rel_err)
            assert r.instances == 3

    def test_subset_and_zero_tolerance_fails(self):
        reports = run_suite(instances=1, seed=0, tol=0.0,
                            losses=("critic_loss",))
        assert len(reports) == 1
        assert not reports[0].passed
