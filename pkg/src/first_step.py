"""
First step: train the labeling function F_theta on every domain with a supervised source
loss plus a pluggable adaptation loss.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR

from src.augment import AugmentSettings, fixmatch_cm_loss, weak_augment
from src.datamodel import MultiDomainBatch, MultiDomainDataset, iterate_batches
from src.errors import ConfigurationError, DivergenceError
from src.models import ExperimentConfig, OptimizerName, PluginName
from src.networks import LabelingNetwork, build_labeling_network
from src.pseudolabel import hard_label

logger = logging.getLogger(__name__)

STAGE = "step1"


@dataclass
class LabelingFunctionState:
    """F_theta with its optimizer, schedule position and loss history"""
    network: LabelingNetwork
    optimizer: torch.optim.Optimizer
    scheduler: Optional[LambdaLR] = None
    epoch: int = 0
    step: int = 0
    loss_history: List[float] = field(default_factory=list)


def get_cosine_schedule(optimizer: torch.optim.Optimizer, num_training_steps: int,
                        num_cycles: float = 7. / 16., last_epoch: int = -1) -> LambdaLR:
    """Cosine decay of the learning rate over ``num_training_steps``"""

    def _lr_lambda(current_step):
        progress = float(current_step) / float(max(1, num_training_steps))
        return max(0., math.cos(math.pi * num_cycles * progress))

    return LambdaLR(optimizer, _lr_lambda, last_epoch)


def build_optimizer(network: nn.Module, config: ExperimentConfig) -> torch.optim.Optimizer:
    if config.step1_optimizer == OptimizerName.SGD:
        return torch.optim.SGD(network.parameters(), lr=config.step1_lr, momentum=config.step1_momentum,
                               weight_decay=config.step1_weight_decay, nesterov=config.step1_momentum > 0)
    return torch.optim.Adam(network.parameters(), lr=config.step1_lr, weight_decay=config.step1_weight_decay)


def build_labeling_state(config: ExperimentConfig, input_shape: Sequence[int], num_classes: int,
                         steps_per_epoch: int = 1) -> LabelingFunctionState:
    """Fresh F_theta; parameter init is seeded from ``config.seed``"""
    torch.manual_seed(config.seed)
    network = build_labeling_network(config.backbone, input_shape, config.hidden_dim, num_classes)
    optimizer = build_optimizer(network, config)
    scheduler = None
    if config.step1_optimizer == OptimizerName.SGD:
        scheduler = get_cosine_schedule(optimizer, max(1, config.step1_epochs * steps_per_epoch))
    return LabelingFunctionState(network=network, optimizer=optimizer, scheduler=scheduler)


# -- adaptation losses ------------------------------------------------------------------

@dataclass
class DomainOutputs:
    """Features and logits of one domain's batch entry"""
    features: torch.Tensor
    logits: torch.Tensor


class AdaptationLossPlugin(ABC):
    """L_da of the first-step objective ``sum L_ce + L_da``.

    A plugin that sets ``replaces_supervised`` returns the whole objective (it already
    contains the source cross-entropy in its own form).
    """
    name: str = "base"
    replaces_supervised: bool = False

    @abstractmethod
    def compute(self, network: LabelingNetwork, batch: MultiDomainBatch,
                source_outputs: List[DomainOutputs], target_outputs: Optional[DomainOutputs],
                rng: np.random.Generator) -> Tuple[torch.Tensor, Dict[str, float]]:
        """Return the loss and any scalar diagnostics worth logging"""


class ZeroAdaptationLoss(AdaptationLossPlugin):
    """Source-only baseline"""
    name = PluginName.ZERO.value

    def compute(self, network, batch, source_outputs, target_outputs, rng):
        return source_outputs[0].logits.new_zeros(()), {}


class MomentMatchingLoss(AdaptationLossPlugin):
    """Squared L2 distance between each source's mean feature and the target's"""
    name = PluginName.MOMENT.value

    def __init__(self, weight: float = 1.0):
        self.weight = weight

    def compute(self, network, batch, source_outputs, target_outputs, rng):
        if target_outputs is None:
            return source_outputs[0].logits.new_zeros(()), {}
        target_mean = target_outputs.features.mean(dim=0)
        distances = [((s.features.mean(dim=0) - target_mean) ** 2).sum() for s in source_outputs]
        loss = self.weight * torch.stack(distances).sum()
        return loss, {"moment_distance": float(loss.detach())}


class FixMatchCMLoss(AdaptationLossPlugin):
    """FixMatch with CutMix and MixStyle strong views; pseudo-labels come from weak target views"""
    name = PluginName.FIXMATCH_CM.value
    replaces_supervised = True

    def __init__(self, settings: AugmentSettings):
        self.settings = settings

    def compute(self, network, batch, source_outputs, target_outputs, rng):
        return fixmatch_cm_objective(network, batch, self.settings.tau0, rng, self.settings)


def fixmatch_cm_objective(network: LabelingNetwork, batch: MultiDomainBatch, tau0: float,
                          rng: np.random.Generator, settings: Optional[AugmentSettings] = None
                          ) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Pseudo-label weak target views, then score the strong views"""
    settings = settings or AugmentSettings(tau0=tau0)
    pseudo_labels = None
    if batch.has_target and settings.use_target:
        with torch.no_grad():
            weak = weak_augment(batch.target_inputs, rng)
            pseudo_labels = hard_label(F.softmax(network(weak), dim=-1))
    loss, terms = fixmatch_cm_loss(network, batch, pseudo_labels, tau0, rng, settings, return_terms=True)
    diagnostics = {"fixmatch_source": float(terms["source"].detach()),
                   "fixmatch_target": float(terms["target"].detach()),
                   "target_gate_fraction": float(terms["target_gate_fraction"])}
    return loss, diagnostics


def build_plugin(config: ExperimentConfig) -> AdaptationLossPlugin:
    if config.step1_plugin == PluginName.ZERO:
        return ZeroAdaptationLoss()
    if config.step1_plugin == PluginName.MOMENT:
        return MomentMatchingLoss(config.moment_weight)
    if config.step1_plugin == PluginName.FIXMATCH_CM:
        return FixMatchCMLoss(AugmentSettings(
            tau0=config.tau0, use_cutmix=config.use_cutmix, use_mixstyle=config.use_mixstyle,
            use_target=config.use_target_terms, cutmix_beta=config.cutmix_beta,
            mixstyle_alpha=config.mixstyle_alpha))
    raise ConfigurationError(f"unknown adaptation plugin: {config.step1_plugin}")


# -- training -----------------------------------------------------------------------------

def supervised_loss(source_outputs: List[DomainOutputs], batch: MultiDomainBatch) -> torch.Tensor:
    """Sum over source domains of the mean cross-entropy"""
    losses = [F.cross_entropy(out.logits, labels)
              for out, (_, labels) in zip(source_outputs, batch.source_entries)]
    return torch.stack(losses).sum()


def _domain_outputs(network: LabelingNetwork, inputs: torch.Tensor) -> DomainOutputs:
    features = network.features(inputs)
    return DomainOutputs(features=features, logits=network.classifier(features))


def step1_objective(network: LabelingNetwork, batch: MultiDomainBatch, plugin: AdaptationLossPlugin,
                    rng: np.random.Generator) -> Tuple[torch.Tensor, Dict[str, float]]:
    source_outputs = [_domain_outputs(network, inputs) for inputs, _ in batch.source_entries]
    target_outputs = _domain_outputs(network, batch.target_inputs) if batch.has_target else None
    supervised = supervised_loss(source_outputs, batch)
    adaptation, diagnostics = plugin.compute(network, batch, source_outputs, target_outputs, rng)
    total = adaptation if plugin.replaces_supervised else supervised + adaptation
    metrics = {"loss": float(total.detach()), "supervised_loss": float(supervised.detach()),
               "adaptation_loss": float(adaptation.detach()), **diagnostics}
    return total, metrics


def train_one_step(state: LabelingFunctionState, batch: MultiDomainBatch, plugin: AdaptationLossPlugin,
                   rng: np.random.Generator) -> Dict[str, float]:
    state.network.train()
    loss, metrics = step1_objective(state.network, batch, plugin, rng)
    if not torch.isfinite(loss):
        raise DivergenceError("first-step loss is not finite", step=state.step)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    state.loss_history.append(metrics["loss"])
    state.step += 1
    metrics["lr"] = state.optimizer.param_groups[0]["lr"]
    return metrics


def train_step1(state: LabelingFunctionState, dataset: MultiDomainDataset, plugin: AdaptationLossPlugin,
                config: ExperimentConfig, metrics_store=None, seed: Optional[int] = None,
                eval_fn=None) -> LabelingFunctionState:
    """Run epochs ``state.epoch .. config.step1_epochs - 1`` of mini-batch training.

    ``eval_fn(network) -> accuracy`` is called after every epoch when given.
    """
    if dataset.num_source_domains < 1:
        raise ConfigurationError("first step needs at least one source domain")
    seed = config.seed if seed is None else seed
    batches = iterate_batches(dataset, config.batch_size, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    logger.info("[STEP1] Training labeling function with plugin '%s' for %d epochs (%d batches/epoch)",
                plugin.name, config.step1_epochs, batches.batches_per_epoch)
    while state.epoch < config.step1_epochs:
        epoch_losses = []
        for batch in batches.epoch():
            metrics = train_one_step(state, batch, plugin, rng)
            epoch_losses.append(metrics["loss"])
            if metrics_store is not None:
                metrics_store.log(STAGE, state.step, state.epoch, None, metrics)
        state.epoch += 1
        accuracy = eval_fn(state.network) if eval_fn is not None else None
        if metrics_store is not None and accuracy is not None:
            metrics_store.log(STAGE, state.step, state.epoch, None, {"target_accuracy": accuracy})
        logger.info("[STEP1] Epoch %d/%d - mean loss %.4f%s", state.epoch, config.step1_epochs,
                    float(np.mean(epoch_losses)), "" if accuracy is None else f", target accuracy {accuracy:.4f}")
    return state


def predict(network: nn.Module, inputs: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Softmax probabilities, computed in evaluation mode without gradients"""
    was_training = network.training
    network.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunk = inputs[start:start + batch_size]
            logits = network.predict_logits(chunk) if hasattr(network, "predict_logits") else network(chunk)
            chunks.append(F.softmax(logits, dim=-1))
    network.train(was_training)
    if not chunks:
        return inputs.new_zeros((0, 0))
    return torch.cat(chunks)
