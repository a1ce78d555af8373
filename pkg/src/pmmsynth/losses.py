"""Selective-supervision objectives.

Per modality ``i`` the gates are

* synthesis / adversarial / discriminator: ``(1 - sc_i) * m_i`` (target with ground truth)
* reconstruction: ``sc_i * m_i`` (source with ground truth)

L1 and squared-L2 terms are averaged over pixels (and batch) per modality and
then summed over modalities.  Gates multiply the per-modality terms, and a
closed gate skips the term entirely, so missing channels get exactly zero
gradient.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch import Tensor

from pmmsynth.datamodel import N_MODALITIES, ModalityMask
from pmmsynth.errors import ConstraintViolation, ShapeError, UntrainableSampleError, ValidationError


@dataclass(frozen=True)
class LossWeights:
    syn: float = 100.0
    rec: float = 30.0
    adv: float = 1.0

    def __post_init__(self) -> None:
        if min(self.syn, self.rec, self.adv) < 0:
            raise ValidationError(f"loss weights must be nonnegative, got {self}")


@dataclass
class LossReport:
    total: Tensor
    syn: Tensor
    rec: Tensor
    adv: Tensor
    per_modality: dict[str, list[float]] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("total", "syn", "rec", "adv")}


@dataclass
class DiscriminatorReport:
    total: Tensor
    per_modality: list[float]


def _check_masks(*masks: ModalityMask) -> None:
    for m in masks:
        if len(m.bits) != N_MODALITIES:
            raise ShapeError(f"mask must have {N_MODALITIES} bits")


def _check_images(*images: Tensor) -> None:
    for t in images:
        if t.shape[-3] != N_MODALITIES:
            raise ShapeError(f"expected 6 modality channels, got shape {tuple(t.shape)}")


def synthesis_gates(m: ModalityMask, sc: ModalityMask) -> list[int]:
    return [(1 - s) * a for s, a in zip(sc.bits, m.bits)]


def reconstruction_gates(m: ModalityMask, sc: ModalityMask) -> list[int]:
    return [s * a for s, a in zip(sc.bits, m.bits)]


def mask_input(y: Tensor | np.ndarray, sc: ModalityMask, availability: ModalityMask | None = None):
    """``x_i = y_i * sc_i``; works on ``(6, H, W)`` or ``(B, 6, H, W)``."""
    _check_masks(sc)
    if availability is not None and not sc.dominated_by(availability):
        raise ConstraintViolation(f"condition {sc} marks an unavailable modality (availability {availability})")
    if isinstance(y, np.ndarray):
        return y * sc.as_array().astype(y.dtype)[:, None, None]
    _check_images(y)
    return y * y.new_tensor(sc.bits)[:, None, None]


def _channel(t: Tensor, i: int) -> Tensor:
    return t[..., i, :, :]


def generator_loss(
    y_hat: Tensor,
    y: Tensor,
    m: ModalityMask,
    sc: ModalityMask,
    disc_outputs: Mapping[int, Tensor],
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """``disc_outputs[i]`` is ``Dis_i(y_hat_i)``, required for every gated target."""
    _check_masks(m, sc)
    _check_images(y_hat, y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {tuple(y_hat.shape)} vs target {tuple(y.shape)}")
    if not sc.dominated_by(m):
        raise ConstraintViolation(f"condition {sc} not dominated by availability {m}")
    zero = y_hat.sum() * 0.0
    syn, rec, adv = zero, zero, zero
    per = {"syn": [0.0] * N_MODALITIES, "rec": [0.0] * N_MODALITIES, "adv": [0.0] * N_MODALITIES}
    for i, (gs, gr) in enumerate(zip(synthesis_gates(m, sc), reconstruction_gates(m, sc))):
        if gs:
            l1 = (_channel(y_hat, i) - _channel(y, i)).abs().mean()
            if i not in disc_outputs:
                raise ValidationError(f"missing discriminator output for gated modality {i}")
            l2 = (disc_outputs[i] - 1.0).pow(2).mean()
            syn = syn + l1
            adv = adv + l2
            per["syn"][i] = l1.item()
            per["adv"][i] = l2.item()
        if gr:
            l1 = (_channel(y_hat, i) - _channel(y, i)).abs().mean()
            rec = rec + l1
            per["rec"][i] = l1.item()
    total = weights.syn * syn + weights.rec * rec + weights.adv * adv
    return LossReport(total, syn, rec, adv, per)


def discriminator_loss(
    y_hat: Tensor,
    y: Tensor,
    m: ModalityMask,
    sc: ModalityMask,
    bank: Callable[[int, Tensor], Tensor],
) -> DiscriminatorReport:
    """Least-squares critic loss on gated targets; ``y_hat`` is detached here."""
    _check_masks(m, sc)
    _check_images(y_hat, y)
    if not sc.dominated_by(m):
        raise ConstraintViolation(f"condition {sc} not dominated by availability {m}")
    y_hat = y_hat.detach()
    total = y.new_zeros(())
    per = [0.0] * N_MODALITIES
    for i, g in enumerate(synthesis_gates(m, sc)):
        if not g:
            continue
        fake = bank(i, _channel(y_hat, i).unsqueeze(-3))
        real = bank(i, _channel(y, i).unsqueeze(-3))
        term = fake.pow(2).mean() + (real - 1.0).pow(2).mean()
        total = total + term
        per[i] = term.item()
    return DiscriminatorReport(total, per)


def valid_conditions(m: ModalityMask) -> list[ModalityMask]:
    """Every SC dominated by ``m`` with at least one source and one target; 2**k - 2 of them."""
    idx = m.indices
    out = []
    for choice in itertools.product((0, 1), repeat=len(idx)):
        if 0 < sum(choice) < len(idx):
            bits = [0] * N_MODALITIES
            for i, c in zip(idx, choice):
                bits[i] = c
            out.append(ModalityMask(tuple(bits)))
    return out


def sample_condition(m: ModalityMask, rng: np.random.Generator) -> ModalityMask:
    if m.count < 2:
        raise UntrainableSampleError(f"availability {m} has fewer than 2 modalities")
    # uniform over the nonempty proper subsets of the available set
    k = m.count
    code = int(rng.integers(1, 2**k - 1))
    bits = [0] * N_MODALITIES
    for pos, i in enumerate(m.indices):
        bits[i] = (code >> pos) & 1
    return ModalityMask(tuple(bits))
