import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusereg.losses import LossReport, LossWeights, diffusion_loss, edge_loss, mse_loss, total_loss
from fusereg.volume import Volume3D

from .oracles import central_difference, max_rel_err, naive_diffusion, naive_mse, oracle_edge_map


def rand_vol(rng, shape=(8, 8, 8)):
    return rng.normal(0, 1, shape)


class TestMSE:
    def test_identical_inputs(self):
        v = Volume3D(np.ones((4, 4, 4), np.float32))
        assert mse_loss(v, v) == 0.0

    def test_zeros_vs_ones(self):
        a = Volume3D(np.zeros((4, 4, 4), np.float32))
        b = Volume3D(np.ones((4, 4, 4), np.float32))
        assert mse_loss(a, b) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            mse_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        a, b = rand_vol(rng), rand_vol(rng)
        ours = mse_loss(torch.tensor(a), torch.tensor(b))
        oracle = naive_mse(a, b)
        assert abs(float(ours) - oracle) / oracle < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand_vol(rng, (4, 4, 4)), rand_vol(rng, (4, 4, 4))
        assert mse_loss(a, b) == mse_loss(b, a)


class TestDiffusion:
    def test_constant_field(self):
        u = np.ones((3, 5, 5, 5)) * 2.5
        assert diffusion_loss(u) == 0.0

    def test_linear_ramp_field(self):
        # u = (x, 0, 0): every forward x-difference of component 0 is 1
        D = H = W = 6
        u = np.zeros((3, D, H, W))
        u[0] = np.arange(W)[None, None, :]
        assert diffusion_loss(u) == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        u = rng.normal(0, 2, (3, 6, 7, 5))
        ours = float(diffusion_loss(torch.tensor(u)))
        oracle = naive_diffusion(u)
        assert abs(ours - oracle) / abs(oracle) < 1e-10

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError, match="field"):
            diffusion_loss(np.zeros((2, 4, 4, 4)))


class TestEdgeLoss:
    def test_identical_inputs(self):
        rng = np.random.default_rng(2)
        v = rand_vol(rng)
        assert edge_loss(torch.tensor(v), torch.tensor(v)) == 0.0

    def test_constant_vs_step_matches_composed_oracle(self):
        const = np.full((6, 6, 6), 2.0)
        step = np.zeros((6, 6, 6))
        step[:, :, 3:] = 1.0
        ours = float(edge_loss(torch.tensor(const), torch.tensor(step)))
        oracle = naive_mse(oracle_edge_map(const), oracle_edge_map(step))
        assert ours == pytest.approx(oracle, rel=1e-10)

    def test_bounded_by_one(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            val = float(edge_loss(torch.tensor(rand_vol(rng)), torch.tensor(rand_vol(rng))))
            assert 0.0 <= val <= 1.0


class TestTotalLoss:
    def test_perfect_match_zero_field(self):
        rng = np.random.default_rng(4)
        v = rand_vol(rng)
        report = total_loss(v, v, np.zeros((3, 8, 8, 8)))
        assert report.l_total == 0.0

    def test_weight_masking(self):
        rng = np.random.default_rng(5)
        a, b = rand_vol(rng), rand_vol(rng)
        u = rng.normal(0, 1, (3, 8, 8, 8))
        report = total_loss(a, b, u, LossWeights(1.0, 0.0, 0.0))
        assert report.l_total == pytest.approx(report.l_mse, abs=1e-12)

    def test_weighted_sum_of_components(self):
        rng = np.random.default_rng(6)
        a, b = rand_vol(rng), rand_vol(rng)
        u = rng.normal(0, 1, (3, 8, 8, 8))
        report = total_loss(a, b, u)
        expected = float(mse_loss(a, b)) + float(diffusion_loss(u)) + float(edge_loss(a, b))
        assert abs(report.l_total - expected) < 1e-9

    def test_linear_in_weights(self):
        rng = np.random.default_rng(7)
        a, b = rand_vol(rng, (5, 5, 5)), rand_vol(rng, (5, 5, 5))
        u = rng.normal(0, 1, (3, 5, 5, 5))
        r1 = total_loss(a, b, u, LossWeights(1.0, 2.0, 3.0))
        r2 = total_loss(a, b, u, LossWeights(2.0, 4.0, 6.0))
        assert r2.l_total == pytest.approx(2.0 * r1.l_total, rel=1e-12)

    def test_all_terms_nonnegative(self):
        rng = np.random.default_rng(8)
        report = total_loss(rand_vol(rng), rand_vol(rng), rng.normal(0, 1, (3, 8, 8, 8)))
        assert report.l_mse >= 0 and report.l_diff >= 0 and report.l_edge >= 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="w_diff"):
            LossWeights(1.0, -0.1, 1.0)

    def test_json_record_keys(self):
        record = LossReport(0.1, 0.2, 0.3, 0.6).json_record(step=12)
        assert list(record) == ["step", "l_mse", "l_diff", "l_edge", "l_total"]


class TestGradients:
    """Analytic gradients vs central finite differences (64-bit)."""

    def test_mse_gradient(self):
        rng = np.random.default_rng(9)
        a = rand_vol(rng, (6, 6, 6))
        b = rand_vol(rng, (6, 6, 6))
        x = torch.tensor(a, requires_grad=True)
        (grad,) = torch.autograd.grad(mse_loss(x, torch.tensor(b)), x)
        idx = rng.choice(a.size, 25, replace=False)
        fd = central_difference(lambda arr: float(mse_loss(torch.tensor(arr), torch.tensor(b))), a.copy(), idx)
        assert max_rel_err(grad.numpy().reshape(-1)[idx], fd) < 1e-4

    def test_diffusion_gradient(self):
        rng = np.random.default_rng(10)
        u = rng.normal(0, 1, (3, 6, 6, 6))
        x = torch.tensor(u, requires_grad=True)
        (grad,) = torch.autograd.grad(diffusion_loss(x), x)
        idx = rng.choice(u.size, 25, replace=False)
        fd = central_difference(lambda arr: float(diffusion_loss(torch.tensor(arr))), u.copy(), idx)
        assert max_rel_err(grad.numpy().reshape(-1)[idx], fd) < 1e-4

    def test_edge_loss_gradient(self):
        rng = np.random.default_rng(11)
        a = rand_vol(rng, (6, 6, 6))
        b = rand_vol(rng, (6, 6, 6))
        x = torch.tensor(a, requires_grad=True)
        (grad,) = torch.autograd.grad(edge_loss(x, torch.tensor(b)), x)
        idx = rng.choice(a.size, 25, replace=False)
        fd = central_difference(
            lambda arr: float(edge_loss(torch.tensor(arr), torch.tensor(b))), a.copy(), idx
        )
        assert max_rel_err(grad.numpy().reshape(-1)[idx], fd) < 1e-4
