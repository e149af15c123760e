"""
Second step: noise-robust target training (inner problem) and labeling-function
fine-tuning by implicit hypergradients (outer problem).

The inner objective on a target batch is

    L_trn = mean(mask * CE(p_bar, y_hat)) + lambda * mean((m - sum log sigma)+)

where ``p_bar`` averages the class probabilities over several draws of the stochastic
feature, so a label the model cannot fit is cheapest to carry with a large sigma.
The outer objective is the mean per-instance ``sum log sigma`` of the target model.
The hypergradient of the outer objective with respect to the labeling parameters theta
follows the implicit function theorem, with the inverse Hessian-vector product replaced
by a truncated Neumann series.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.datamodel import MultiDomainDataset, iterate_batches, split_held_out
from src.errors import ContractError, DivergenceError
from src.first_step import LabelingFunctionState
from src.models import (ExperimentConfig, NeumannConfig, Phase, PhaseTrigger, SecondStepMode,
                        ThresholdMode, ValidationSource)
from src.networks import TargetNetwork
from src.pseudolabel import PseudoLabelBatch, ThresholdState, make_pseudo_labels
from src.stochastic_head import hinge_on_scores

logger = logging.getLogger(__name__)

STAGE = "step2"

Tensors = Sequence[torch.Tensor]


# -- second-order building blocks ------------------------------------------------------

def _as_list(tensors: Union[torch.Tensor, Tensors]) -> List[torch.Tensor]:
    return [tensors] if isinstance(tensors, torch.Tensor) else list(tensors)


def _fill_none(grads, like: Tensors) -> List[torch.Tensor]:
    return [torch.zeros_like(p) if g is None else g for g, p in zip(grads, like)]


def _vector_jacobian(outputs: Tensors, inputs: Tensors, vectors: Tensors) -> List[torch.Tensor]:
    """``sum_i <vectors[i], d outputs[i] / d inputs>``, skipping outputs with no graph"""
    pairs = [(o, v) for o, v in zip(outputs, vectors) if o.requires_grad]
    if not pairs:
        return [torch.zeros_like(p) for p in inputs]
    grads = torch.autograd.grad([o for o, _ in pairs], inputs, grad_outputs=[v for _, v in pairs],
                                retain_graph=True, allow_unused=True)
    return _fill_none(grads, inputs)


def _train_gradients(loss: torch.Tensor, params: Tensors) -> List[torch.Tensor]:
    if not loss.requires_grad:
        raise ContractError("loss has no differentiable path to the parameters")
    grads = torch.autograd.grad(loss, params, create_graph=True, allow_unused=True)
    return _fill_none(grads, params)


def hvp(loss_fn: Callable[[], torch.Tensor], params: Union[torch.Tensor, Tensors],
        v: Union[torch.Tensor, Tensors]) -> List[torch.Tensor]:
    """Hessian-vector product by double backward; the Hessian is never materialized"""
    params, v = _as_list(params), _as_list(v)
    grads = _train_gradients(loss_fn(), params)
    return [h.detach() for h in _vector_jacobian(grads, params, v)]


def _neumann_from_gradients(grads: Tensors, params: Tensors, v: Tensors,
                            cfg: NeumannConfig) -> List[torch.Tensor]:
    p = [t.detach().clone() for t in v]
    total = [t.clone() for t in p]
    for j in range(1, cfg.num_terms):
        hp = _vector_jacobian(grads, params, p)
        p = [p_i - cfg.eta * (h_i.detach() + cfg.damping * p_i) for p_i, h_i in zip(p, hp)]
        if not all(torch.isfinite(p_i).all() for p_i in p):
            raise DivergenceError("Neumann series produced a non-finite term", step=j)
        total = [t + p_i for t, p_i in zip(total, p)]
    return [cfg.eta * t for t in total]


def neumann_inverse_hvp(loss_fn: Callable[[], torch.Tensor], params: Union[torch.Tensor, Tensors],
                        v: Union[torch.Tensor, Tensors], cfg: NeumannConfig) -> List[torch.Tensor]:
    """``eta * sum_{j<J} p_j`` with ``p_0 = v`` and ``p_{j+1} = p_j - eta * (H + damping I) p_j``.

    Approximates ``(H + damping I)^-1 v`` when the spectral radius of
    ``I - eta (H + damping I)`` is below one.
    """
    params, v = _as_list(params), _as_list(v)
    grads = _train_gradients(loss_fn(), params)
    return _neumann_from_gradients(grads, params, v, cfg)


def implicit_hypergradient(train_loss_fn: Callable[[], torch.Tensor], val_loss_fn: Callable[[], torch.Tensor],
                           inner_params: Tensors, outer_params: Tensors,
                           cfg: NeumannConfig) -> List[torch.Tensor]:
    """``dL_val/dtheta = direct - d/dtheta <stop_grad(H^-1 dL_val/dpsi), dL_trn/dpsi>``"""
    inner_params, outer_params = list(inner_params), list(outer_params)

    val_loss = val_loss_fn()
    direct = _fill_none(torch.autograd.grad(val_loss, inner_params + outer_params, allow_unused=True),
                        inner_params + outer_params)
    v1, direct_outer = direct[:len(inner_params)], direct[len(inner_params):]

    train_grads = _train_gradients(train_loss_fn(), inner_params)
    v2 = _neumann_from_gradients(train_grads, inner_params, v1, cfg)
    mixed = _vector_jacobian(train_grads, outer_params, v2)
    return [(d - m).detach() for d, m in zip(direct_outer, mixed)]


def _norm(tensors: Tensors) -> float:
    return float(torch.sqrt(sum((t.double() ** 2).sum() for t in tensors)))


# -- states --------------------------------------------------------------------------------

@dataclass
class TargetModelState:
    """M_psi with its optimizer"""
    network: TargetNetwork
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    loss_history: List[float] = field(default_factory=list)


@dataclass
class BilevelState:
    """Everything the second step mutates: theta (outer), psi (inner), tau and the phase.

    ``generator`` feeds the feature noise of inner steps and ``outer_generator`` every
    draw of the outer problem, so the inner noise does not depend on whether the
    labeling function is being fine-tuned.
    """
    labeling: LabelingFunctionState
    target: TargetModelState
    threshold: ThresholdState
    neumann: NeumannConfig
    outer_optimizer: torch.optim.Optimizer
    generator: torch.Generator
    outer_generator: torch.Generator
    loss_weight_lambda: float = 0.1
    margin_m: float = 4.0
    gumbel_temperature: float = 1.0
    gumbel_straight_through: bool = True
    gumbel_sample_forward: bool = False
    feature_samples: int = 8
    phase: Phase = Phase.INNER_WARMUP
    bilevel_started_epoch: Optional[int] = None

    @property
    def bilevel_started(self) -> bool:
        return self.phase == Phase.BILEVEL

    def enter_bilevel(self):
        if self.phase == Phase.BILEVEL:
            raise ContractError("bilevel phase was already entered")
        self.phase = Phase.BILEVEL
        self.bilevel_started_epoch = self.target.epoch
        logger.info("[STEP2] Entering bilevel phase at epoch %d", self.target.epoch)


def build_threshold_state(config: ExperimentConfig, num_classes: int,
                          tau: Optional[float] = None) -> ThresholdState:
    if tau is not None:
        return ThresholdState(ThresholdMode.FIXED, tau=tau, alpha=config.ema_alpha)
    return ThresholdState(config.threshold_mode, tau=config.fixed_tau, alpha=config.ema_alpha,
                          num_classes=num_classes)


def build_bilevel_state(labeling: LabelingFunctionState, config: ExperimentConfig, stochastic: bool = True,
                        threshold: Optional[ThresholdState] = None, seed: Optional[int] = None) -> BilevelState:
    """Copy F_theta into a target network (adding the stochastic head if asked) and wire the optimizers"""
    seed = config.seed if seed is None else seed
    network = TargetNetwork.from_labeling(labeling.network, stochastic=stochastic)
    optimizer = torch.optim.SGD(network.parameters(), lr=config.step2_lr, momentum=config.step2_momentum)
    outer_optimizer = torch.optim.SGD(labeling.network.parameters(), lr=config.outer_lr)
    return BilevelState(
        labeling=labeling,
        target=TargetModelState(network=network, optimizer=optimizer),
        threshold=threshold or build_threshold_state(config, labeling.network.num_classes),
        neumann=config.neumann_config(),
        outer_optimizer=outer_optimizer,
        generator=torch.Generator().manual_seed(seed + 2),
        outer_generator=torch.Generator().manual_seed(seed + 6),
        loss_weight_lambda=config.loss_weight_lambda,
        margin_m=config.margin_m,
        gumbel_temperature=config.gumbel_temperature,
        gumbel_straight_through=config.gumbel_straight_through,
        gumbel_sample_forward=config.gumbel_sample_forward,
        feature_samples=config.feature_samples,
    )


# -- losses ------------------------------------------------------------------------------

def predictive_log_probs(logits: torch.Tensor) -> torch.Tensor:
    """``log mean_s softmax(logits[s])`` over a leading sample dimension; plain log-softmax without one"""
    log_probs = F.log_softmax(logits, dim=-1)
    if log_probs.dim() < 3:
        return log_probs
    return torch.logsumexp(log_probs, dim=0) - math.log(log_probs.shape[0])


def inner_loss_terms(bstate: BilevelState, inputs: torch.Tensor, pseudo_labels: PseudoLabelBatch,
                     generator: Optional[torch.Generator] = None,
                     epsilon: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Masked cross-entropy of the sample-averaged prediction, plus the weighted hinge on sum log sigma.

    ``epsilon`` fixes the feature noise, with or without a leading sample dimension;
    otherwise ``bstate.feature_samples`` draws are taken from ``generator``.
    """
    if pseudo_labels.mask is None or pseudo_labels.soft is None:
        raise ContractError("pseudo-labels need a mask and soft labels")
    network = bstate.target.network
    if network.is_stochastic:
        num_samples = None if epsilon is not None else bstate.feature_samples
        output = network(inputs, generator=generator, epsilon=epsilon, num_samples=num_samples)
    else:
        output = network(inputs)
    per_sample = -(pseudo_labels.soft * predictive_log_probs(output.logits)).sum(dim=-1)
    mask = pseudo_labels.mask.detach().to(per_sample.dtype)
    ce = (mask * per_sample).mean()
    if output.feature is not None:
        scores = output.feature.log_sigma.sum(dim=-1)
        ment = hinge_on_scores(scores, bstate.margin_m)
        score = scores.mean()
    else:
        ment = ce.new_zeros(())
        score = ce.new_zeros(())
    total = ce + bstate.loss_weight_lambda * ment
    if not torch.isfinite(total):
        raise DivergenceError(f"inner loss is not finite (ce={float(ce)}, ment={float(ment)})",
                              step=bstate.target.step)
    return {"total": total, "ce": ce, "ment": ment, "uncertainty": score}


def inner_loss(bstate: BilevelState, inputs: torch.Tensor, pseudo_labels: PseudoLabelBatch,
               generator: Optional[torch.Generator] = None,
               epsilon: Optional[torch.Tensor] = None) -> torch.Tensor:
    return inner_loss_terms(bstate, inputs, pseudo_labels, generator, epsilon)["total"]


def outer_loss(target_network: TargetNetwork, inputs: torch.Tensor) -> torch.Tensor:
    """Mean per-instance ``sum log sigma`` of the target model's stochastic feature"""
    if not target_network.is_stochastic:
        raise ContractError("outer loss needs a target network with a stochastic head")
    log_sigma = target_network.head.log_sigma(target_network.trunk(inputs))
    return log_sigma.sum(dim=-1).mean()


def _labels(bstate: BilevelState, inputs: torch.Tensor, use_gumbel: bool,
            update_threshold: bool = True) -> PseudoLabelBatch:
    return make_pseudo_labels(bstate.labeling.network, inputs, bstate.threshold, bstate.outer_generator,
                              use_gumbel=use_gumbel,
                              temperature=bstate.gumbel_temperature,
                              straight_through=bstate.gumbel_straight_through,
                              update_threshold=update_threshold,
                              sample_forward=bstate.gumbel_sample_forward)


def hypergradient(bstate: BilevelState, train_inputs: torch.Tensor,
                  val_inputs: torch.Tensor) -> List[torch.Tensor]:
    """IFT hypergradient of the outer loss with respect to the labeling parameters.

    The inner loss is evaluated once with Gumbel labels drawn at the current theta, so
    the Hessian and the mixed partials share one set of noise draws. Their forward value
    is the hard label unless ``gumbel_sample_forward`` is set.
    """
    if bstate.phase != Phase.BILEVEL:
        raise ContractError("hypergradients are only computed in the bilevel phase")
    labeling, target = bstate.labeling.network, bstate.target.network

    def train_loss_fn():
        labels = _labels(bstate, train_inputs, use_gumbel=True, update_threshold=False)
        return inner_loss(bstate, train_inputs, labels, bstate.outer_generator)

    return implicit_hypergradient(train_loss_fn, lambda: outer_loss(target, val_inputs),
                                  list(target.parameters()), list(labeling.parameters()), bstate.neumann)


def outer_step(bstate: BilevelState, grads: Tensors):
    """Plain SGD step on theta along the hypergradient"""
    if not all(torch.isfinite(g).all() for g in grads):
        raise DivergenceError("hypergradient is not finite", step=bstate.target.step)
    for p, g in zip(bstate.labeling.network.parameters(), grads):
        p.grad = g.clone()
    bstate.outer_optimizer.step()
    bstate.outer_optimizer.zero_grad()


# -- phase trigger ---------------------------------------------------------------------------

class ConvergenceMonitor:
    """Fires once the epoch loss stops improving, or after a fixed number of epochs"""

    def __init__(self, trigger: PhaseTrigger = PhaseTrigger.CONVERGENCE, tol: float = 1e-3,
                 window: int = 5, warmup_epochs: int = 5):
        self.trigger = PhaseTrigger(trigger)
        self.tol = tol
        self.window = window
        self.warmup_epochs = warmup_epochs
        self.history: List[float] = []

    def update(self, epoch_loss: float) -> bool:
        self.history.append(float(epoch_loss))
        return self.converged

    @property
    def converged(self) -> bool:
        if self.trigger == PhaseTrigger.FIXED_EPOCHS:
            return len(self.history) >= self.warmup_epochs
        if len(self.history) <= self.window:
            return False
        before, now = self.history[-self.window - 1], self.history[-1]
        improvement = (before - now) / max(abs(before), 1e-12)
        return improvement < self.tol

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "ConvergenceMonitor":
        return cls(config.phase_trigger, config.convergence_tol, config.convergence_window,
                   config.warmup_epochs)


# -- training loops -------------------------------------------------------------------------

def _inner_step(bstate: BilevelState, inputs: torch.Tensor) -> Dict[str, float]:
    target = bstate.target
    # argmax-forward Gumbel labels equal the hard one-hots without a graph
    use_gumbel = bstate.phase == Phase.BILEVEL and bstate.gumbel_sample_forward
    with torch.no_grad():
        labels = _labels(bstate, inputs, use_gumbel)
    target.network.train()
    terms = inner_loss_terms(bstate, inputs, labels, bstate.generator)
    mask_empty = not bool(labels.mask.any())
    # without a stochastic head an all-closed mask leaves nothing to learn from
    if not (mask_empty and not target.network.is_stochastic):
        target.optimizer.zero_grad()
        terms["total"].backward()
        target.optimizer.step()
    target.step += 1
    target.loss_history.append(float(terms["total"].detach()))
    return {
        "loss_trn": float(terms["total"].detach()),
        "loss_ce": float(terms["ce"].detach()),
        "loss_ment": float(terms["ment"].detach()),
        "uncertainty": float(terms["uncertainty"].detach()),
        "masked_fraction": labels.masked_fraction,
        "tau": bstate.threshold.tau,
        "mask_empty": float(mask_empty),
    }


def _train_target(bstate: BilevelState, dataset: MultiDomainDataset, config: ExperimentConfig,
                  allow_bilevel: bool, metrics_store=None, eval_fn=None,
                  seed: Optional[int] = None) -> BilevelState:
    seed = config.seed if seed is None else seed
    target_id = dataset.target_id
    train_part, val_iterator = dataset, None
    if allow_bilevel and config.validation_source == ValidationSource.HELD_OUT:
        train_part, val_part = split_held_out(dataset, config.held_out_fraction, seed)
        val_iterator = iterate_batches(val_part, config.batch_size, seed + 4, domain_ids=[target_id])
    batches = iterate_batches(train_part, config.batch_size, seed + 3, domain_ids=[target_id])
    monitor = ConvergenceMonitor.from_config(config)
    target = bstate.target

    while target.epoch < config.step2_epochs:
        epoch_losses, empty_steps, steps = [], 0, 0
        for batch in batches.epoch():
            inputs = batch.target_inputs
            metrics = _inner_step(bstate, inputs)
            epoch_losses.append(metrics["loss_trn"])
            empty_steps += int(metrics.pop("mask_empty"))
            steps += 1

            if bstate.phase == Phase.BILEVEL and target.step % config.inner_steps_per_outer == 0:
                val_inputs = inputs if val_iterator is None else next(val_iterator).target_inputs
                grads = hypergradient(bstate, inputs, val_inputs)
                outer_step(bstate, grads)
                metrics["hypergradient_norm"] = _norm(grads)
            if target.network.is_stochastic:
                with torch.no_grad():
                    metrics["loss_val"] = float(outer_loss(target.network, inputs))
            if metrics_store is not None:
                metrics_store.log(STAGE, target.step, target.epoch, bstate.phase.value, metrics)

        if empty_steps == steps:
            logger.warning("[STEP2] Epoch %d: confidence mask was empty on every batch (tau=%.4f)",
                           target.epoch, bstate.threshold.tau)
        epoch_loss = float(np.mean(epoch_losses))
        target.epoch += 1
        accuracy = eval_fn(target.network) if eval_fn is not None else None
        if metrics_store is not None and accuracy is not None:
            metrics_store.log(STAGE, target.step, target.epoch, bstate.phase.value, {"target_accuracy": accuracy})
        logger.info("[STEP2] Epoch %d/%d (%s) - L_trn %.4f, tau %.4f%s", target.epoch, config.step2_epochs,
                    bstate.phase.value, epoch_loss, bstate.threshold.tau,
                    "" if accuracy is None else f", target accuracy {accuracy:.4f}")

        if allow_bilevel and bstate.phase == Phase.INNER_WARMUP and monitor.update(epoch_loss):
            bstate.enter_bilevel()

    if allow_bilevel and bstate.phase == Phase.INNER_WARMUP:
        logger.warning("[STEP2] Phase trigger never fired; finished in warmup phase (bilevel_started=False)")
    return bstate


def naive_second_step(labeling: LabelingFunctionState, target_dataset: MultiDomainDataset,
                      tau: Union[float, ThresholdState], config: ExperimentConfig, metrics_store=None,
                      eval_fn=None) -> TargetModelState:
    """Vanilla copy of F_theta trained on thresholded hard pseudo-labels"""
    threshold = tau if isinstance(tau, ThresholdState) else build_threshold_state(
        config, labeling.network.num_classes, tau=tau)
    bstate = build_bilevel_state(labeling, config, stochastic=False, threshold=threshold)
    logger.info("[STEP2] Naive second step, threshold %r", threshold)
    _train_target(bstate, target_dataset, config, allow_bilevel=False, metrics_store=metrics_store,
                  eval_fn=eval_fn)
    return bstate.target


def bort2_train(bstate: BilevelState, dataset: MultiDomainDataset, config: ExperimentConfig,
                metrics_store=None, eval_fn=None) -> Tuple[TargetModelState, LabelingFunctionState]:
    """Noise-robust target training; with ``bort2_full`` the labeling function is fine-tuned
    by hypergradients once the inner problem has converged"""
    allow_bilevel = config.second_step_mode == SecondStepMode.BORT2_FULL
    logger.info("[STEP2] %s: lambda=%s, m=%s, threshold %r", config.second_step_mode.value,
                bstate.loss_weight_lambda, bstate.margin_m, bstate.threshold)
    _train_target(bstate, dataset, config, allow_bilevel=allow_bilevel, metrics_store=metrics_store,
                  eval_fn=eval_fn)
    return bstate.target, bstate.labeling