"""
Turning labeling-function outputs into supervision: hard labels, confidence masks,
Gumbel-softmax labels and the confidence threshold schedule.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ContractError, DomainError
from src.models import ThresholdMode

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-6
MIN_TAU = 1e-6


@dataclass
class PseudoLabelBatch:
    """Pseudo-labels for a batch of target inputs.

    ``hard`` uses the lowest index on ties. ``soft`` is the label the loss consumes: a
    Gumbel-softmax sample when gradients must reach the labeling function, otherwise
    the one-hot of ``hard``.
    """
    probs: torch.Tensor
    hard: torch.Tensor
    confidence: torch.Tensor
    soft: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None

    @property
    def masked_fraction(self) -> float:
        if self.mask is None or self.mask.numel() == 0:
            return 0.0
        return float(self.mask.float().mean())

    def __len__(self) -> int:
        return int(self.hard.shape[0])


def hard_label(probs: torch.Tensor) -> PseudoLabelBatch:
    """argmax labels and max-probability confidences of a (batch of) distribution(s)"""
    batch = probs.unsqueeze(0) if probs.dim() == 1 else probs
    check = batch.detach().double()
    if not torch.isfinite(check).all() or (check < -NORMALIZATION_TOL).any():
        raise DomainError("probabilities must be finite and non-negative")
    if batch.shape[0] and ((check.sum(dim=-1) - 1.0).abs() > NORMALIZATION_TOL).any():
        raise DomainError("probability rows must sum to 1")
    confidence = batch.detach().amax(dim=-1)
    # argmax returns the first maximal index
    hard = torch.argmax(batch.detach(), dim=-1)
    return PseudoLabelBatch(probs=batch, hard=hard, confidence=confidence)


def sample_gumbel(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32,
                  device=None) -> torch.Tensor:
    finfo = torch.finfo(dtype)
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    u = u.clamp(min=finfo.tiny, max=1.0 - finfo.eps)
    return -torch.log(-torch.log(u))


def gumbel_soft_label(logits: torch.Tensor, temperature: float = 1.0,
                      generator: Optional[torch.Generator] = None, straight_through: bool = True,
                      noise: Optional[torch.Tensor] = None,
                      forward_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``softmax((logits + g) / temperature)`` with Gumbel noise ``g``.

    In straight-through mode the forward value is a one-hot while gradients flow through
    the soft sample: the sample's argmax, or ``forward_index`` when given.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = sample_gumbel(logits.shape, generator, logits.dtype, logits.device)
    soft = F.softmax((logits + noise) / temperature, dim=-1)
    if not straight_through:
        return soft
    index = soft.argmax(dim=-1, keepdim=True) if forward_index is None else forward_index.unsqueeze(-1)
    hard = torch.zeros_like(soft).scatter_(-1, index.to(soft.device), 1.0)
    return (hard - soft).detach() + soft


class ThresholdState:
    """Confidence threshold tau, fixed or following an EMA curriculum.

    Adaptive mode starts at ``p_mean + p_std`` of the first batch's max-probabilities and
    then moves ``tau <- alpha * tau + (1 - alpha) * (p_mean - p_std)``. Per-class mode
    keeps one such tau for each predicted class, initialized the first time that class
    is predicted; classes not yet seen fall back to the global tau.
    """

    def __init__(self, mode: ThresholdMode = ThresholdMode.ADAPTIVE, tau: float = 0.95,
                 alpha: float = 0.999, num_classes: Optional[int] = None):
        self.mode = ThresholdMode(mode)
        if self.mode == ThresholdMode.PER_CLASS and not num_classes:
            raise ContractError("per-class thresholds need num_classes")
        if not 0.0 <= alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
        if tau < 0:
            raise DomainError(f"tau must be non-negative, got {tau}")
        self.tau = float(tau)
        self.alpha = float(alpha)
        self.num_classes = num_classes
        self.initialized = self.mode == ThresholdMode.FIXED
        self.floor_stat: Optional[float] = None
        self.num_updates = 0
        self.last_update_empty = False
        self.per_class_tau: Optional[np.ndarray] = None
        self.per_class_floor: Optional[np.ndarray] = None
        if self.mode == ThresholdMode.PER_CLASS:
            self.per_class_tau = np.full(num_classes, np.nan)
            self.per_class_floor = np.full(num_classes, np.nan)

    def _ema(self, tau: Optional[float], initialized: bool, values: np.ndarray) -> Tuple[float, float]:
        p_mean, p_std = float(values.mean()), float(values.std())
        floor = p_mean - p_std
        if not initialized:
            tau = p_mean + p_std
        else:
            tau = self.alpha * tau + (1.0 - self.alpha) * floor
        return min(max(tau, MIN_TAU), 1.0), floor

    def update(self, batch_probs: torch.Tensor) -> "ThresholdState":
        """Feed one batch; accepts full probability rows or a vector of max-probabilities"""
        values = batch_probs.detach().double().cpu()
        if values.dim() == 2:
            confidence, hard = values.max(dim=-1)[0].numpy(), torch.argmax(values, dim=-1).numpy()
        elif values.dim() == 1:
            if self.mode == ThresholdMode.PER_CLASS:
                raise ContractError("per-class thresholds need full probability rows")
            confidence, hard = values.numpy(), None
        else:
            raise ContractError(f"expected a 1-D or 2-D tensor, got shape {tuple(values.shape)}")

        if confidence.size == 0:
            self.last_update_empty = True
            logger.warning("Empty batch passed to the threshold update; tau stays at %.6f", self.tau)
            return self
        self.last_update_empty = False
        self.num_updates += 1

        if self.mode == ThresholdMode.FIXED:
            self.floor_stat = float(confidence.mean() - confidence.std())
            return self

        self.tau, self.floor_stat = self._ema(self.tau, self.initialized, confidence)
        self.initialized = True
        if self.mode == ThresholdMode.PER_CLASS:
            for c in np.unique(hard):
                class_conf = confidence[hard == c]
                seen = not np.isnan(self.per_class_tau[c])
                tau_c, floor_c = self._ema(self.per_class_tau[c] if seen else None, seen, class_conf)
                self.per_class_tau[c], self.per_class_floor[c] = tau_c, floor_c
        return self

    def thresholds_for(self, hard: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        """Threshold each sample is compared against, in the dtype of its confidence"""
        if self.mode != ThresholdMode.PER_CLASS:
            return torch.full(hard.shape, self.tau, dtype=dtype, device=hard.device)
        per_class = np.where(np.isnan(self.per_class_tau), self.tau, self.per_class_tau)
        table = torch.as_tensor(per_class, dtype=dtype, device=hard.device)
        return table[hard]

    def snapshot(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "tau": self.tau,
            "alpha": self.alpha,
            "num_classes": self.num_classes,
            "initialized": self.initialized,
            "floor_stat": self.floor_stat,
            "num_updates": self.num_updates,
            "per_class_tau": None if self.per_class_tau is None else self.per_class_tau.tolist(),
            "per_class_floor": None if self.per_class_floor is None else self.per_class_floor.tolist(),
        }

    @classmethod
    def from_snapshot(cls, snapshot: Dict[str, Any]) -> "ThresholdState":
        state = cls(mode=snapshot["mode"], tau=snapshot["tau"], alpha=snapshot["alpha"],
                    num_classes=snapshot.get("num_classes"))
        state.initialized = snapshot["initialized"]
        state.floor_stat = snapshot.get("floor_stat")
        state.num_updates = snapshot.get("num_updates", 0)
        if snapshot.get("per_class_tau") is not None:
            state.per_class_tau = np.array(snapshot["per_class_tau"], dtype=float)
            state.per_class_floor = np.array(snapshot["per_class_floor"], dtype=float)
        return state

    def __repr__(self) -> str:
        return f"ThresholdState(mode={self.mode.value}, tau={self.tau:.6f}, updates={self.num_updates})"


def update_adaptive_threshold(state: ThresholdState, batch_probs: torch.Tensor) -> ThresholdState:
    return state.update(batch_probs)


def confidence_mask(pseudo_labels: PseudoLabelBatch, threshold: ThresholdState) -> Tuple[torch.Tensor, float]:
    """``confidence >= tau`` (inclusive), and the fraction of samples let through"""
    thresholds = threshold.thresholds_for(pseudo_labels.hard, dtype=pseudo_labels.confidence.dtype)
    mask = pseudo_labels.confidence >= thresholds
    pseudo_labels.mask = mask
    return mask, pseudo_labels.masked_fraction


def make_pseudo_labels(labeling_network: nn.Module, inputs: torch.Tensor, threshold: ThresholdState,
                       generator: Optional[torch.Generator] = None, use_gumbel: bool = False,
                       temperature: float = 1.0, straight_through: bool = True,
                       update_threshold: bool = True, sample_forward: bool = True) -> PseudoLabelBatch:
    """Label ``inputs`` with the labeling network at its current parameters.

    The threshold is updated with this batch before masking. With ``use_gumbel`` the soft
    labels keep a graph back to the labeling network's parameters; without
    ``sample_forward`` their straight-through forward value is the hard label.
    """
    with torch.set_grad_enabled(use_gumbel and torch.is_grad_enabled()):
        logits = labeling_network(inputs)
    probs = F.softmax(logits.detach(), dim=-1)
    labels = hard_label(probs)
    if update_threshold:
        threshold.update(probs)
    confidence_mask(labels, threshold)
    if use_gumbel:
        forward_index = None if sample_forward else labels.hard
        labels.soft = gumbel_soft_label(logits, temperature, generator, straight_through,
                                        forward_index=forward_index)
    else:
        labels.soft = F.one_hot(labels.hard, probs.shape[-1]).to(probs.dtype)
    return labels
