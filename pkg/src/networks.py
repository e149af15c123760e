"""
Backbones, the labeling network F_theta and the second-step target network M_psi.

Both backbones expose the same three parts: ``stem`` (first stage, where MixStyle is
applied), ``body`` (remaining feature stages) and ``head_layer`` (the final hidden
layer, which the target network swaps for a stochastic head).
"""

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ConfigurationError, ContractError
from src.models import Backbone
from src.stochastic_head import StochasticFeature, StochasticHead

logger = logging.getLogger(__name__)

FeatureHook = Callable[[torch.Tensor], torch.Tensor]


class MLPBackbone(nn.Module):
    """Two hidden layers for feature-vector inputs"""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Linear(input_dim, hidden_dim), nn.ReLU())
        self.body = nn.Identity()
        self.head_layer = nn.Linear(hidden_dim, hidden_dim)
        self.feature_dim = hidden_dim


class ConvBackbone(nn.Module):
    """Three conv layers then one fully connected hidden layer (the classifier adds the second)"""

    def __init__(self, in_channels: int, hidden_dim: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.body = nn.Sequential(
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head_layer = nn.Linear(128, hidden_dim)
        self.feature_dim = hidden_dim


def build_backbone(kind: Backbone, input_shape: Sequence[int], hidden_dim: int) -> nn.Module:
    kind = Backbone(kind)
    if kind == Backbone.MLP:
        if len(input_shape) != 1:
            raise ConfigurationError(f"mlp backbone needs vector inputs, got shape {tuple(input_shape)}")
        return MLPBackbone(input_shape[0], hidden_dim)
    if len(input_shape) != 3:
        raise ConfigurationError(f"conv backbone needs (C, H, W) inputs, got shape {tuple(input_shape)}")
    return ConvBackbone(input_shape[0], hidden_dim)


class LabelingNetwork(nn.Module):
    """F_theta: backbone followed by a linear classifier"""

    def __init__(self, backbone: nn.Module, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(backbone.feature_dim, num_classes)
        self.num_classes = num_classes

    def features(self, x: torch.Tensor, feature_hook: Optional[FeatureHook] = None) -> torch.Tensor:
        h = self.backbone.stem(x)
        if feature_hook is not None:
            h = feature_hook(h)
        h = self.backbone.body(h)
        return F.relu(self.backbone.head_layer(h))

    def forward(self, x: torch.Tensor, feature_hook: Optional[FeatureHook] = None) -> torch.Tensor:
        return self.classifier(self.features(x, feature_hook))


def build_labeling_network(kind: Backbone, input_shape: Sequence[int], hidden_dim: int,
                           num_classes: int) -> LabelingNetwork:
    return LabelingNetwork(build_backbone(kind, input_shape, hidden_dim), num_classes)


@dataclass
class TargetOutput:
    logits: torch.Tensor
    feature: Optional[StochasticFeature] = None


class TargetNetwork(nn.Module):
    """M_psi, built by copying F_theta.

    With a stochastic head, the copied final hidden layer becomes the mu layer and a fresh
    sigma layer is added, so the deterministic path reproduces F_theta at construction.
    Without one, the copy is a plain network (the naive second step).
    """

    def __init__(self, trunk: nn.Module, head: nn.Module, classifier: nn.Linear):
        super().__init__()
        self.trunk = trunk
        self.head = head
        self.classifier = classifier

    @classmethod
    def from_labeling(cls, labeling: LabelingNetwork, stochastic: bool = True) -> "TargetNetwork":
        backbone = labeling.backbone
        trunk = nn.Sequential(copy.deepcopy(backbone.stem), copy.deepcopy(backbone.body))
        if stochastic:
            head = StochasticHead(backbone.head_layer.in_features, backbone.head_layer.out_features)
            with torch.no_grad():
                head.mu_layer.weight.copy_(backbone.head_layer.weight)
                head.mu_layer.bias.copy_(backbone.head_layer.bias)
        else:
            head = copy.deepcopy(backbone.head_layer)
        network = cls(trunk, head, copy.deepcopy(labeling.classifier))
        return network.to(next(labeling.parameters()).device)

    @property
    def is_stochastic(self) -> bool:
        return isinstance(self.head, StochasticHead)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None,
                deterministic: bool = False, epsilon: Optional[torch.Tensor] = None,
                num_samples: Optional[int] = None) -> TargetOutput:
        """Logits through the sampled feature; with several samples they gain a leading sample dimension"""
        h = self.trunk(x)
        if not self.is_stochastic:
            return TargetOutput(logits=self.classifier(F.relu(self.head(h))))
        if deterministic:
            return TargetOutput(logits=self.classifier(F.relu(self.head.forward_deterministic(h))))
        feature = self.head.forward_stochastic(h, generator=generator, epsilon=epsilon, num_samples=num_samples)
        return TargetOutput(logits=self.classifier(F.relu(feature.z)), feature=feature)

    def sigma(self, x: torch.Tensor) -> torch.Tensor:
        """Per-instance sigma of the stochastic feature, without sampling"""
        if not self.is_stochastic:
            raise ContractError("target network has no stochastic head")
        return torch.exp(self.head.log_sigma(self.trunk(x)))

    def predict_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x, deterministic=True).logits

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """psi0 (trunk), psi_mu, psi_sigma (empty without a stochastic head) and psi1 (classifier)"""
        if self.is_stochastic:
            mu, sigma = list(self.head.mu_layer.parameters()), list(self.head.sigma_layer.parameters())
        else:
            mu, sigma = list(self.head.parameters()), []
        return {
            "psi0": list(self.trunk.parameters()),
            "psi_mu": mu,
            "psi_sigma": sigma,
            "psi1": list(self.classifier.parameters()),
        }
