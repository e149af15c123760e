"""
Augmentations for FixMatch-CM: weak flip/translate views for pseudo-labelling, CutMix
with label mixing on inputs, MixStyle statistic mixing on first-stage features, and the
resulting consistency objective.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.datamodel import MultiDomainBatch
from src.errors import ContractError, DomainError
from src.pseudolabel import PseudoLabelBatch

logger = logging.getLogger(__name__)

MIXSTYLE_EPS = 1e-6
WEAK_TRANSLATE_FRACTION = 0.125
WEAK_JITTER_STD = 0.05

Box = Tuple[Tuple[int, int], ...]


@dataclass
class MixedSample:
    """A CutMix output. ``mix_ratio`` is the share of the input still belonging to ``label_a``"""
    input: torch.Tensor
    label_a: Optional[Union[int, torch.Tensor]]
    label_b: Optional[Union[int, torch.Tensor]]
    mix_ratio: float
    box: Box


def _spatial_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    # vectors mix along their single axis, images along (H, W)
    return tuple(shape[-1:]) if len(shape) == 1 else tuple(shape[-2:])


def sample_cutmix_box(spatial_shape: Sequence[int], rng: np.random.Generator, beta: float = 1.0) -> Box:
    """Patch whose area fraction is ``1 - lam`` with ``lam ~ Beta(beta, beta)``, centered uniformly and clipped"""
    lam = rng.beta(beta, beta)
    cut_ratio = (1.0 - lam) ** (1.0 / len(spatial_shape))
    box = []
    for size in spatial_shape:
        cut = int(size * cut_ratio)
        center = rng.uniform(0, size)
        lo = int(np.clip(center - cut // 2, 0, size))
        hi = int(np.clip(center + cut // 2, 0, size))
        box.append((lo, hi))
    return tuple(box)


def box_area(box: Box) -> int:
    return int(np.prod([hi - lo for lo, hi in box]))


def cutmix(sample_a: torch.Tensor, sample_b: torch.Tensor, rng: Optional[np.random.Generator] = None,
           box: Optional[Box] = None, beta: float = 1.0, label_a=None, label_b=None) -> MixedSample:
    """Paste the co-located patch of ``sample_b`` into ``sample_a``"""
    if sample_a.shape != sample_b.shape:
        raise ContractError(f"cutmix needs equal shapes, got {tuple(sample_a.shape)} and {tuple(sample_b.shape)}")
    spatial = _spatial_shape(sample_a.shape)
    if box is None:
        if rng is None:
            raise ContractError("cutmix needs either a box or an rng")
        box = sample_cutmix_box(spatial, rng, beta)
    if len(box) != len(spatial):
        raise ContractError(f"box {box} does not match spatial shape {spatial}")

    region = (Ellipsis,) + tuple(slice(lo, hi) for lo, hi in box)
    mixed = sample_a.clone()
    mixed[region] = sample_b[region]
    mix_ratio = 1.0 - box_area(box) / float(np.prod(spatial))
    return MixedSample(input=mixed, label_a=label_a, label_b=label_b, mix_ratio=mix_ratio, box=box)


def _channel_stats(x: torch.Tensor, eps: float) -> Tuple[torch.Tensor, torch.Tensor]:
    dims = tuple(range(2, x.dim()))
    mu = x.mean(dim=dims, keepdim=True)
    sig = (x.var(dim=dims, keepdim=True, unbiased=False) + eps).sqrt()
    return mu, sig


def mixstyle(features_a: torch.Tensor, features_b: torch.Tensor,
             mix_coefficient: Union[float, torch.Tensor], eps: float = MIXSTYLE_EPS) -> torch.Tensor:
    """Re-style ``features_a`` with per-channel statistics ``c * stats(a) + (1 - c) * stats(b)``.

    Features are ``(B, C, *spatial)``; ``(B, D)`` vectors are treated as one channel of
    length ``D``. ``mix_coefficient`` is a scalar or one value per instance.
    """
    if features_a.shape != features_b.shape:
        raise ContractError(
            f"mixstyle needs equal shapes, got {tuple(features_a.shape)} and {tuple(features_b.shape)}")
    flat = features_a.dim() == 2
    a = features_a.unsqueeze(1) if flat else features_a
    b = features_b.unsqueeze(1) if flat else features_b

    coef = torch.as_tensor(mix_coefficient, dtype=a.dtype, device=a.device)
    if ((coef < 0) | (coef > 1)).any():
        raise DomainError("mix coefficient must lie in [0, 1]")
    if coef.dim() == 1:
        coef = coef.view(-1, *([1] * (a.dim() - 1)))

    mu_a, sig_a = _channel_stats(a, eps)
    mu_b, sig_b = _channel_stats(b, eps)
    mu_a, sig_a, mu_b, sig_b = mu_a.detach(), sig_a.detach(), mu_b.detach(), sig_b.detach()
    content = (a - mu_a) / sig_a
    mixed = content * (coef * sig_a + (1 - coef) * sig_b) + coef * mu_a + (1 - coef) * mu_b
    return mixed.squeeze(1) if flat else mixed


def weak_augment(inputs: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Random horizontal flip plus a small reflect-padded shift for images, Gaussian jitter for vectors"""
    if inputs.dim() == 2:
        noise = rng.normal(0.0, WEAK_JITTER_STD, size=tuple(inputs.shape))
        return inputs + torch.as_tensor(noise, dtype=inputs.dtype, device=inputs.device)
    if inputs.dim() != 4:
        raise ContractError(f"weak_augment expects (B, D) or (B, C, H, W), got {tuple(inputs.shape)}")

    height, width = inputs.shape[-2:]
    pad = max(1, int(round(WEAK_TRANSLATE_FRACTION * min(height, width))))
    padded = F.pad(inputs, (pad, pad, pad, pad), mode="reflect")
    out = torch.empty_like(inputs)
    for i in range(inputs.shape[0]):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        view = padded[i, :, dy:dy + height, dx:dx + width]
        if rng.random() < 0.5:
            view = torch.flip(view, dims=(-1,))
        out[i] = view
    return out


@dataclass
class AugmentSettings:
    tau0: float = 0.95
    use_cutmix: bool = True
    use_mixstyle: bool = True
    use_target: bool = True
    cutmix_beta: float = 1.0
    mixstyle_alpha: float = 0.1


@dataclass
class FixMatchCMViews:
    """Strongly augmented inputs of every participating domain, flattened into one batch.

    ``domain_index`` says which batch entry each row came from; ``gate`` is 1 for source
    rows and ``1(confidence >= tau0)`` for target rows.
    """
    inputs: torch.Tensor
    label_a: torch.Tensor
    label_b: torch.Tensor
    mix_ratio: torch.Tensor
    domain_index: torch.Tensor
    is_target: torch.Tensor
    gate: torch.Tensor
    partner_is_target: torch.Tensor
    style_partner: Optional[torch.Tensor] = None
    style_coefficient: Optional[torch.Tensor] = None

    def feature_hook(self):
        if self.style_partner is None:
            return None
        partner, coef = self.style_partner, self.style_coefficient
        return lambda h: mixstyle(h, h[partner], coef.to(h.dtype))


def build_fixmatch_cm_views(batch: MultiDomainBatch, pseudo_labels: Optional[PseudoLabelBatch],
                            rng: np.random.Generator, settings: AugmentSettings) -> FixMatchCMViews:
    """Draw CutMix partners from all domains and MixStyle partners from a different domain"""
    entries, labels, is_target = [], [], []
    for (inputs, y), domain_id in zip(batch.per_domain, batch.domain_ids):
        if domain_id == batch.target_id:
            if not settings.use_target:
                continue
            if pseudo_labels is None:
                raise ContractError("target entry present but no pseudo-labels were supplied")
            if len(pseudo_labels) != inputs.shape[0]:
                raise ContractError("pseudo-labels do not match the target batch")
            y = pseudo_labels.hard
        entries.append(inputs)
        labels.append(y.long())
        is_target.append(torch.full((inputs.shape[0],), domain_id == batch.target_id))
    if not entries:
        raise ContractError("batch has no domain to train on")

    inputs = torch.cat(entries)
    label_a = torch.cat(labels)
    target_rows = torch.cat(is_target)
    domain_index = torch.cat([torch.full((x.shape[0],), d, dtype=torch.long) for d, x in enumerate(entries)])
    n = inputs.shape[0]

    mixed = inputs.clone()
    label_b = label_a.clone()
    mix_ratio = torch.ones(n, dtype=inputs.dtype)
    partner_is_target = torch.zeros(n, dtype=torch.bool)
    if settings.use_cutmix:
        partners = rng.integers(0, n, size=n)
        for i, j in enumerate(partners):
            sample = cutmix(inputs[i], inputs[j], rng, beta=settings.cutmix_beta)
            mixed[i] = sample.input
            mix_ratio[i] = sample.mix_ratio
        label_b = label_a[torch.as_tensor(partners)]
        partner_is_target = target_rows[torch.as_tensor(partners)]
        if partner_is_target.any():
            logger.debug("CutMix used pseudo-labels of %d target partners", int(partner_is_target.sum()))

    gate = torch.ones(n, dtype=inputs.dtype)
    if target_rows.any():
        confidence = pseudo_labels.confidence
        gate[target_rows] = (confidence >= torch.tensor(settings.tau0, dtype=confidence.dtype)).to(inputs.dtype)

    style_partner, style_coefficient = None, None
    if settings.use_mixstyle:
        num_entries = len(entries)
        style_partner = torch.empty(n, dtype=torch.long)
        for i in range(n):
            own = int(domain_index[i])
            if num_entries > 1:
                other = int(rng.choice([d for d in range(num_entries) if d != own]))
            else:
                other = own
            rows = torch.nonzero(domain_index == other).flatten()
            style_partner[i] = rows[int(rng.integers(0, len(rows)))]
        style_coefficient = torch.as_tensor(
            rng.beta(settings.mixstyle_alpha, settings.mixstyle_alpha, size=n), dtype=inputs.dtype)

    return FixMatchCMViews(inputs=mixed, label_a=label_a, label_b=label_b, mix_ratio=mix_ratio,
                           domain_index=domain_index, is_target=target_rows, gate=gate,
                           partner_is_target=partner_is_target, style_partner=style_partner,
                           style_coefficient=style_coefficient)


def fixmatch_cm_terms(logits: torch.Tensor, views: FixMatchCMViews) -> Dict[str, torch.Tensor]:
    """Per-domain means of ``gate * r * CE(y_a) + (1 - r) * CE(y_b)``, summed over domains"""
    ce_a = F.cross_entropy(logits, views.label_a, reduction="none")
    ce_b = F.cross_entropy(logits, views.label_b, reduction="none")
    ratio = views.mix_ratio.to(logits.dtype)
    per_sample = views.gate.to(logits.dtype) * ratio * ce_a + (1.0 - ratio) * ce_b

    source = logits.new_zeros(())
    target = logits.new_zeros(())
    for d in torch.unique(views.domain_index):
        rows = views.domain_index == d
        term = per_sample[rows].mean()
        if views.is_target[rows][0]:
            target = target + term
        else:
            source = source + term
    return {"source": source, "target": target, "total": source + target,
            "target_gate_fraction": views.gate[views.is_target].mean() if views.is_target.any()
            else logits.new_zeros(())}


def fixmatch_cm_loss(model: nn.Module, batch: MultiDomainBatch, pseudo_labels: Optional[PseudoLabelBatch],
                     tau0: float, rng: np.random.Generator, settings: Optional[AugmentSettings] = None,
                     return_terms: bool = False):
    """Augment, forward with MixStyle after the first stage, and score the consistency objective"""
    settings = settings or AugmentSettings()
    settings = replace(settings, tau0=tau0)
    views = build_fixmatch_cm_views(batch, pseudo_labels, rng, settings)
    logits = model(views.inputs, feature_hook=views.feature_hook())
    terms = fixmatch_cm_terms(logits, views)
    if return_terms:
        return terms["total"], terms
    return terms["total"]
