"""
Gaussian feature layer: every instance's feature is N(mu, sigma^2) with data-dependent
mu and sigma, sampled by reparameterization.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ContractError, DomainError

logger = logging.getLogger(__name__)

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 6.0


@dataclass
class StochasticFeature:
    """One sampled feature batch; ``z == mu + sigma * epsilon`` elementwise, broadcast over
    a leading sample dimension when several draws were taken"""
    mu: torch.Tensor
    sigma: torch.Tensor
    log_sigma: torch.Tensor
    z: torch.Tensor
    epsilon: torch.Tensor


class StochasticHead(nn.Module):
    """Produces ``mu = f_mu(z_prev)`` and ``sigma = exp(clamp(f_sigma(z_prev), -6, 6))``.

    ``mu_layer`` starts as an identity map and ``sigma_layer`` at zero, so the initial
    sigma is exactly 1 everywhere.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.mu_layer = nn.Linear(in_features, out_features)
        self.sigma_layer = nn.Linear(in_features, out_features)
        self.reset_parameters()

    def reset_parameters(self):
        with torch.no_grad():
            nn.init.eye_(self.mu_layer.weight)
            self.mu_layer.bias.zero_()
            self.sigma_layer.weight.zero_()
            self.sigma_layer.bias.zero_()

    def _check_input(self, z_prev: torch.Tensor):
        if z_prev.shape[-1] != self.in_features:
            raise ContractError(
                f"stochastic head expects features of size {self.in_features}, got {tuple(z_prev.shape)}")

    def log_sigma(self, z_prev: torch.Tensor) -> torch.Tensor:
        self._check_input(z_prev)
        return torch.clamp(self.sigma_layer(z_prev), LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    def forward_stochastic(self, z_prev: torch.Tensor, generator: Optional[torch.Generator] = None,
                           epsilon: Optional[torch.Tensor] = None,
                           num_samples: Optional[int] = None) -> StochasticFeature:
        """Sample ``z = mu + sigma * epsilon``; ``epsilon`` is drawn unless given.

        With ``num_samples`` (or an ``epsilon`` carrying one extra leading dimension) ``z``
        holds that many draws per instance, shaped ``(num_samples, *mu.shape)``.
        """
        self._check_input(z_prev)
        mu = self.mu_layer(z_prev)
        log_sigma = self.log_sigma(z_prev)
        sigma = torch.exp(log_sigma)
        if epsilon is None:
            shape = mu.shape if num_samples is None else (num_samples, *mu.shape)
            epsilon = torch.randn(shape, generator=generator, dtype=mu.dtype, device=mu.device)
        elif epsilon.shape != mu.shape and epsilon.shape[1:] != mu.shape:
            raise ContractError(f"epsilon shape {tuple(epsilon.shape)} does not match {tuple(mu.shape)}")
        elif num_samples is not None and epsilon.shape != (num_samples, *mu.shape):
            raise ContractError(f"epsilon shape {tuple(epsilon.shape)} does not hold {num_samples} samples")
        return StochasticFeature(mu=mu, sigma=sigma, log_sigma=log_sigma, z=mu + sigma * epsilon,
                                 epsilon=epsilon)

    def forward_deterministic(self, z_prev: torch.Tensor) -> torch.Tensor:
        """Evaluation path: mu only"""
        self._check_input(z_prev)
        return self.mu_layer(z_prev)

    def forward(self, z_prev: torch.Tensor, generator: Optional[torch.Generator] = None,
                deterministic: bool = False):
        if deterministic:
            return self.forward_deterministic(z_prev)
        return self.forward_stochastic(z_prev, generator)


def _as_batch(sigma: torch.Tensor) -> torch.Tensor:
    return sigma.unsqueeze(0) if sigma.dim() == 1 else sigma


def uncertainty_score(sigma: torch.Tensor) -> torch.Tensor:
    """Per-instance ``sum(log sigma)`` over the feature dimension"""
    sigma = _as_batch(sigma)
    if not torch.all(sigma > 0):
        raise DomainError("sigma must be strictly positive")
    return torch.log(sigma).sum(dim=-1)


def hinge_on_scores(scores: torch.Tensor, margin: float) -> torch.Tensor:
    """Batch mean of ``(margin - score)+``"""
    if not math.isfinite(margin):
        raise DomainError(f"margin must be finite, got {margin}")
    return F.relu(margin - scores).mean()


def entropy_max_loss(sigma: torch.Tensor, margin: float) -> torch.Tensor:
    """``mean((m - sum(log sigma))+)``: pushes sigma up until the summed log reaches ``m``"""
    return hinge_on_scores(uncertainty_score(sigma), margin)
