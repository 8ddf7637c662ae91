"""Training-time bag augmentations: subsampling, slot-level mixup, SubMix.

Subsampling draws a fraction p of a bag's instances without replacement
each step; with many instances per bag this almost never removes every
positive instance, so the bag label is preserved with high probability
while the model sees a fresh instance subset every iteration.

Slot-level mixup convexly combines the slot summaries of two bags and
their label distributions with a shared ratio lambda ~ Beta(alpha, alpha).
Because every bag is summarized into the same number of slots, no patch
pairing between bags is needed. Mixing starts only after a warmup
fraction L of the total epochs, once slots have learned stable
representations ("late mix"). SubMix is the composition of both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Bag
from .errors import DimensionError, ParameterError
from .model import SlotMILModel, bag_to_slots, slots_to_logits
from .numerics import RngStream, Tensor, add, sample_beta, sample_subset, scale


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 1.0           # subsampling rate, (0, 1]
    alpha: float = 1.0       # Beta parameter for the mixing ratio
    L: float = 0.0           # late-mix fraction of total epochs, [0, 1)
    mixup_enabled: bool = False
    sub_enabled: bool = False

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ParameterError(f"subsampling rate p must be in (0, 1], got {self.p}")
        if self.alpha <= 0.0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.L < 1.0:
            raise ParameterError(f"late-mix fraction L must be in [0, 1), got {self.L}")


def subsample(bag: Bag, p: float, rng: RngStream) -> Bag:
    """Keep k = max(1, round(p*M)) instances, chosen uniformly, in order.

    Rounding is half-up. Selected rows are bit-identical to the input's;
    latent labels follow the same index subset.
    """
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"subsampling rate p must be in (0, 1], got {p}")
    m = bag.num_instances
    k = max(1, int(math.floor(p * m + 0.5)))
    idx = sample_subset(rng, m, k)
    latents = [bag.latent_labels[i] for i in idx] if bag.latent_labels is not None else None
    return Bag(bag.bag_id, bag.features[idx].copy(), bag.label, latents)


def slot_mixup(slots_i: Tensor, y_i: np.ndarray, slots_j: Tensor, y_j: np.ndarray,
               lam: float) -> tuple[Tensor, np.ndarray]:
    """Convex combination of two slot matrices and their label distributions."""
    if slots_i.shape != slots_j.shape:
        raise DimensionError(f"slot shapes differ: {slots_i.shape} vs {slots_j.shape}")
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise DimensionError(f"label shapes differ: {y_i.shape} vs {y_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"mixing ratio must be in [0, 1], got {lam}")
    mixed = add(scale(slots_i, lam), scale(slots_j, 1.0 - lam))
    return mixed, lam * y_i + (1.0 - lam) * y_j


def one_hot(label: int, n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes, dtype=np.float64)
    y[label] = 1.0
    return y


def mix_start_epoch(late_frac: float, total_epochs: int) -> int:
    """First epoch at which mixing is active: ceil(L * total_epochs).

    A tiny slack absorbs float error so e.g. 0.2 * 200 resolves to 40.
    """
    return int(math.ceil(late_frac * total_epochs - 1e-9))


def submix_step(model: SlotMILModel, bag: Bag, partner_pool: Sequence[Bag],
                cfg: AugmentConfig, epoch: int, total_epochs: int,
                rng: RngStream) -> tuple[Tensor, np.ndarray]:
    """One augmented forward pass; returns (logits, target distribution).

    The bag is subsampled when enabled. Once mixing is active the partner
    is drawn uniformly from the pool (self-pairing allowed), subsampled
    the same way, and both slot summaries and labels are mixed with a
    single lambda ~ Beta(alpha, alpha). Before the late-mix epoch the
    target stays exactly one-hot.
    """
    if not partner_pool:
        raise ParameterError("partner pool must be non-empty")
    work = subsample(bag, cfg.p, rng) if cfg.sub_enabled else bag
    slots, _ = bag_to_slots(model, work.features)
    n_classes = model.num_classes

    if cfg.mixup_enabled and epoch >= mix_start_epoch(cfg.L, total_epochs):
        partner = partner_pool[rng.randbelow(len(partner_pool))]
        partner_work = subsample(partner, cfg.p, rng) if cfg.sub_enabled else partner
        partner_slots, _ = bag_to_slots(model, partner_work.features)
        lam = sample_beta(rng, cfg.alpha)
        mixed, target = slot_mixup(slots, one_hot(bag.label, n_classes),
                                   partner_slots, one_hot(partner.label, n_classes), lam)
        return slots_to_logits(model, mixed), target

    return slots_to_logits(model, slots), one_hot(bag.label, n_classes)
