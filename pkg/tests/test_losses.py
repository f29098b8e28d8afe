import numpy as np
import pytest
import torch

from artinv.errors import NonFiniteLoss, ShapeMismatch
from artinv.losses import (LossWeights, adv_d_loss, adv_g_loss, compose,
                           feature_matching_loss, recon_loss)


def _recon_oracle(a, b):
    """Independent direct-summation mean squared error."""
    total, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    return total / n


class TestReconLoss:
    def test_identical_inputs_zero(self):
        x = torch.randn(3, 20, 18)
        assert recon_loss(x, x).item() == 0.0

    def test_unit_offset(self):
        zeros = torch.zeros(2, 10, 18)
        assert recon_loss(torch.ones(2, 10, 18), zeros).item() == pytest.approx(1.0)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2, 30, 5))
        b = rng.standard_normal((2, 30, 5))
        ours = recon_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert abs(ours - _recon_oracle(a, b)) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            recon_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestAdversarialLosses:
    def test_perfect_discriminator(self):
        real = [torch.ones(100)]
        fake = [torch.zeros(100)]
        assert adv_d_loss(real, fake).item() == 0.0

    def test_half_half(self):
        real = [torch.full((50,), 0.5), torch.full((70,), 0.5)]
        fake = [torch.full((50,), 0.5), torch.full((70,), 0.5)]
        assert adv_d_loss(real, fake).item() == pytest.approx(0.5)

    def test_fully_fooled(self):
        assert adv_d_loss([torch.zeros(10)], [torch.ones(10)]).item() == pytest.approx(2.0)

    def test_generator_targets(self):
        assert adv_g_loss([torch.ones(10)]).item() == 0.0
        assert adv_g_loss([torch.zeros(10)]).item() == pytest.approx(1.0)
        assert adv_g_loss([torch.full((10,), 0.5)]).item() == pytest.approx(0.25)

    def test_oracle_random_scores(self):
        rng = np.random.default_rng(1)
        real = [torch.from_numpy(rng.standard_normal(40)) for _ in range(3)]
        fake = [torch.from_numpy(rng.standard_normal(40)) for _ in range(3)]
        expected = np.mean([np.mean((r.numpy() - 1) ** 2) + np.mean(f.numpy() ** 2)
                            for r, f in zip(real, fake)])
        assert abs(adv_d_loss(real, fake).item() - expected) < 1e-10
        expected_g = np.mean([np.mean((f.numpy() - 1) ** 2) for f in fake])
        assert abs(adv_g_loss(fake).item() - expected_g) < 1e-10

    def test_nonnegativity_and_gradient_direction(self):
        score = torch.tensor([0.3], requires_grad=True)
        loss = adv_g_loss([score])
        loss.backward()
        assert loss.item() >= 0.0
        assert score.grad.item() < 0.0  # pushing the score up toward 1


class TestFeatureMatching:
    def test_identical_maps_zero(self):
        maps = [[torch.randn(10, 4) for _ in range(3)]]
        assert feature_matching_loss(maps, maps).item() == 0.0

    def test_unit_offset_counts_layers(self):
        rng = torch.Generator().manual_seed(0)
        real = [[torch.randn(8, 3, generator=rng) for _ in range(7)] for _ in range(2)]
        fake = [[r + 1.0 for r in sub] for sub in real]
        assert feature_matching_loss(real, fake).item() == pytest.approx(7.0)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(2)
        real = [[torch.from_numpy(rng.standard_normal((6, 5))) for _ in range(4)]
                for _ in range(3)]
        fake = [[torch.from_numpy(rng.standard_normal((6, 5))) for _ in range(4)]
                for _ in range(3)]
        expected = np.mean([
            sum(np.abs(r.numpy() - f.numpy()).mean() for r, f in zip(rs, fs))
            for rs, fs in zip(real, fake)
        ])
        assert abs(feature_matching_loss(real, fake).item() - expected) < 1e-6

    def test_real_branch_detached(self):
        real_leaf = torch.randn(5, 2, requires_grad=True)
        fake_leaf = torch.randn(5, 2, requires_grad=True)
        loss = feature_matching_loss([[real_leaf]], [[fake_leaf]])
        loss.backward()
        assert real_leaf.grad is None
        assert fake_leaf.grad is not None

    def test_layer_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            feature_matching_loss([[torch.zeros(2, 2)]],
                                  [[torch.zeros(2, 2), torch.zeros(2, 2)]])


class TestCompose:
    def test_unit_inputs(self):
        bundle = compose(1.0, 1.0, 1.0, 1.0)
        assert bundle.inverter_total == pytest.approx(3.0)
        assert bundle.discriminator_total == pytest.approx(1.0)
        assert bundle.total == pytest.approx(4.0)

    def test_zero_weights(self):
        w = LossWeights(recon=0.0, adv_g=0.0, adv_d=0.0, fm=0.0)
        bundle = compose(1.0, 2.0, 3.0, 4.0, w)
        assert bundle.inverter_total == 0.0
        assert bundle.discriminator_total == 0.0
        assert bundle.total == 0.0

    def test_feature_matching_weight(self):
        w = LossWeights(fm=2.0)
        bundle = compose(0.5, 0.25, 0.0, 0.1, w)
        assert bundle.inverter_total == pytest.approx(0.25 + 0.5 + 0.2)

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteLoss) as exc:
            compose(float("nan"), 0.0, 0.0, 0.0)
        assert "recon" in str(exc.value)
        with pytest.raises(NonFiniteLoss):
            compose(0.0, float("inf"), 0.0, 0.0)

    def test_nonnegative_terms_from_real_models(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            real = [torch.from_numpy(rng.standard_normal(30))]
            fake = [torch.from_numpy(rng.standard_normal(30))]
            assert adv_d_loss(real, fake).item() >= 0.0
            assert adv_g_loss(fake).item() >= 0.0
