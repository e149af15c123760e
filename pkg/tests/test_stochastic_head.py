import math

import pytest
import torch

from src.errors import ContractError, DomainError
from src.stochastic_head import (StochasticHead, entropy_max_loss, hinge_on_scores, uncertainty_score)


class TestStochasticHead:
    def test_initial_sigma_is_one(self):
        """Test the zero-initialized sigma layer"""
        head = StochasticHead(4, 4)
        assert torch.allclose(torch.exp(head.log_sigma(torch.randn(5, 4))), torch.ones(5, 4))

    def test_reparameterization(self):
        """Test z == mu + sigma * epsilon with the epsilon returned"""
        head = StochasticHead(3, 2)
        with torch.no_grad():
            head.sigma_layer.bias.fill_(0.5)
        feature = head.forward_stochastic(torch.randn(6, 3), generator=torch.Generator().manual_seed(1))
        assert torch.allclose(feature.z, feature.mu + feature.sigma * feature.epsilon)
        assert torch.allclose(feature.sigma, torch.full((6, 2), math.exp(0.5)))

    def test_fixed_epsilon(self):
        """Test that a supplied epsilon is used as-is"""
        head = StochasticHead(2, 2)
        epsilon = torch.ones(3, 2)
        feature = head.forward_stochastic(torch.zeros(3, 2), epsilon=epsilon)
        assert torch.allclose(feature.z, torch.ones(3, 2))

    def test_several_samples(self):
        """Test that several draws share mu and sigma and stack along a leading dimension"""
        head = StochasticHead(3, 2)
        feature = head.forward_stochastic(torch.randn(4, 3), generator=torch.Generator().manual_seed(0),
                                          num_samples=6)
        assert feature.z.shape == (6, 4, 2)
        assert feature.mu.shape == (4, 2)
        assert torch.allclose(feature.z, feature.mu + feature.sigma * feature.epsilon)
        assert not torch.equal(feature.z[0], feature.z[1])

    def test_fixed_epsilon_with_samples(self):
        """Test a supplied epsilon carrying a sample dimension"""
        head = StochasticHead(2, 2)
        epsilon = torch.stack([torch.zeros(3, 2), torch.ones(3, 2)])
        feature = head.forward_stochastic(torch.zeros(3, 2), epsilon=epsilon)
        assert torch.allclose(feature.z, epsilon)
        with pytest.raises(ContractError):
            head.forward_stochastic(torch.zeros(3, 2), epsilon=epsilon, num_samples=3)

    def test_same_generator_same_sample(self):
        """Test that sampling is reproducible from a generator seed"""
        head = StochasticHead(2, 2)
        x = torch.randn(4, 2)
        a = head(x, generator=torch.Generator().manual_seed(3)).z
        b = head(x, generator=torch.Generator().manual_seed(3)).z
        assert torch.equal(a, b)

    def test_deterministic_path_is_mu(self):
        """Test that evaluation uses mu only"""
        head = StochasticHead(2, 2)
        x = torch.randn(4, 2)
        assert torch.equal(head(x, deterministic=True), head.mu_layer(x))

    def test_log_sigma_is_clamped(self):
        """Test that extreme sigma layer outputs stay finite"""
        head = StochasticHead(1, 1)
        with torch.no_grad():
            head.sigma_layer.bias.fill_(100.0)
        assert float(head.log_sigma(torch.zeros(1, 1))) == 6.0

    def test_dimension_mismatch(self):
        """Test the input size check"""
        with pytest.raises(ContractError):
            StochasticHead(3, 2).forward_stochastic(torch.zeros(2, 4))

    def test_epsilon_shape_mismatch(self):
        """Test that a wrongly shaped epsilon is rejected"""
        with pytest.raises(ContractError):
            StochasticHead(2, 2).forward_stochastic(torch.zeros(2, 2), epsilon=torch.zeros(3, 2))


class TestUncertaintyLoss:
    def test_uncertainty_score_is_sum_of_logs(self):
        """Test the per-instance score"""
        sigma = torch.tensor([[math.e, 1.0], [1.0, 1.0]])
        assert torch.allclose(uncertainty_score(sigma), torch.tensor([1.0, 0.0]))

    def test_single_instance(self):
        """Test that a 1-D sigma is one instance"""
        assert uncertainty_score(torch.ones(3)).shape == (1,)

    def test_non_positive_sigma(self):
        """Test that sigma must be strictly positive"""
        with pytest.raises(DomainError):
            uncertainty_score(torch.tensor([[1.0, 0.0]]))

    def test_hinge_values(self):
        """Test the hinge at, below and above the margin"""
        scores = torch.tensor([2.0, 4.0, 6.0])
        assert float(hinge_on_scores(scores, 4.0)) == pytest.approx(2.0 / 3.0)

    def test_entropy_loss_zero_above_margin(self):
        """Test that the loss vanishes once sum log sigma reaches m"""
        sigma = torch.full((2, 4), math.exp(1.5))
        assert float(entropy_max_loss(sigma, 4.0)) == 0.0

    def test_entropy_loss_pushes_sigma_up(self):
        """Test that the gradient increases log sigma below the margin"""
        log_sigma = torch.zeros(2, 4, requires_grad=True)
        entropy_max_loss(torch.exp(log_sigma), 4.0).backward()
        assert (log_sigma.grad < 0).all()

    def test_non_finite_margin(self):
        """Test that m must be finite"""
        with pytest.raises(DomainError):
            hinge_on_scores(torch.zeros(2), float("inf"))


class TestStochasticHeadStatistics:
    def test_zero_epsilon_gives_mu(self):
        """Test the reparameterization identity at epsilon = 0"""
        head = StochasticHead(3, 3)
        x = torch.randn(2, 3)
        feature = head.forward_stochastic(x, epsilon=torch.zeros(2, 3))
        assert torch.equal(feature.z, head.forward_deterministic(x))

    def test_monte_carlo_moments(self):
        """Test the empirical mean and std of repeated samples"""
        head = StochasticHead(2, 2)
        with torch.no_grad():
            head.sigma_layer.bias.copy_(torch.tensor([0.0, -1.0]))
        x = torch.randn(1, 2).expand(10000, 2)
        feature = head.forward_stochastic(x, generator=torch.Generator().manual_seed(0))
        mu, sigma = feature.mu[0], feature.sigma[0]
        assert ((feature.z.mean(dim=0) - mu).abs() <= 3 * sigma / 100).all()
        assert ((feature.z.std(dim=0) / sigma - 1).abs() < 0.05).all()

    def test_deterministic_path_ignores_sigma(self):
        """Test that evaluation gives no gradient to the sigma layer"""
        head = StochasticHead(2, 2)
        head.forward_deterministic(torch.randn(3, 2)).sum().backward()
        assert head.sigma_layer.weight.grad is None

    def test_entropy_loss_analytic_cases(self):
        """Test the boundary and interior hinge values"""
        assert float(entropy_max_loss(torch.full((1, 4), math.e), 4.0)) == pytest.approx(0.0, abs=1e-6)
        assert float(entropy_max_loss(torch.full((1, 1), math.e), 4.0)) == pytest.approx(3.0)

    def test_entropy_loss_gradient_check(self):
        """Test the analytic gradient in log sigma against central differences"""
        log_sigma = torch.tensor([[0.5, 0.2], [3.0, 2.5]], dtype=torch.float64, requires_grad=True)
        entropy_max_loss(torch.exp(log_sigma), 4.0).backward()
        h = 1e-6
        numeric = torch.zeros_like(log_sigma)
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            plus, minus = log_sigma.detach().clone(), log_sigma.detach().clone()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (entropy_max_loss(torch.exp(plus), 4.0) - entropy_max_loss(torch.exp(minus), 4.0)) / (2 * h)
        assert torch.allclose(log_sigma.grad, numeric, atol=1e-5)
        assert log_sigma.grad[1].abs().sum() == 0

    def test_score_cancellation_and_monotonicity(self):
        """Test sum-of-logs examples"""
        assert float(uncertainty_score(torch.tensor([[math.e ** 2, math.e ** -2]]))) == pytest.approx(0.0, abs=1e-6)
        low, high = torch.tensor([[1.0, 2.0]]), torch.tensor([[1.5, 2.5]])
        assert uncertainty_score(high) > uncertainty_score(low)
