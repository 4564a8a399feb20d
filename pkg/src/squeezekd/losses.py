"""Loss terms for adversarial distillation with intermediate supervision.

The student minimizes

    total = lambda1 * L_b + lambda2 * L_adv + lambda3 * L_is

where L_b matches teacher/student logits in squared L2, L_is matches the
concatenated squeezed descriptors, and L_adv is the student's share of the
minimax game.  The discriminator minimizes its own negative log-likelihood
plus mu-weighted regularizers (L1 + squared-L2 weight penalties and the
confusion term that feeds it student logits labeled as teacher) plus a
class-prediction term on both inputs.  Both players are written as
minimizers so one optimizer code path serves both.

Every term is a batch mean, so values are batch-size invariant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nets import Discriminator, frozen
from .tensor import (
    Tensor,
    binary_cross_entropy,
    cross_entropy,
    l1_norm,
    l2_norm_sq,
)

ROLE_STUDENT = "student_step"
ROLE_DISCRIMINATOR = "discriminator_step"


class NonFiniteLossError(ValueError):
    """A loss component came out NaN or infinite."""

    def __init__(self, part, value):
        super().__init__(f"loss component {part!r} is non-finite ({value})")
        self.part = part
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    """Trade-off factors; all four default to 1."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LossBundle:
    """Scalar loss components logged for one optimization step.

    ``l_adv = l_adv_o + l_reg + l_adv_c`` and
    ``total = lambda1*l_b + lambda2*l_adv + lambda3*l_is`` always hold.
    For discriminator steps l_b and l_is are 0 (they are not part of the
    discriminator's objective) and the minimized quantity is ``l_adv``
    itself; ``total`` still reports the composed value.
    """

    role: str
    l_b: float
    l_adv_o: float
    l_reg: float
    l_adv_c: float
    l_adv: float
    l_is: float
    total: float

    def as_dict(self):
        return asdict(self)


def backbone_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Batch mean of the squared L2 distance between logit vectors."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    batch = student_logits.shape[0]
    return l2_norm_sq(student_logits - teacher_logits) * (1.0 / batch)


def intermediate_loss(student_desc, teacher_desc) -> Tensor:
    """Batch mean squared L2 distance between concatenated descriptors.

    The teacher side is detached: this loss only ever trains the student.
    """
    s = getattr(student_desc, "concatenated", student_desc)
    t = getattr(teacher_desc, "concatenated", teacher_desc)
    if s.shape != t.shape:
        raise ValueError(
            f"descriptor widths differ: {tuple(s.shape)} vs {tuple(t.shape)}"
        )
    batch = s.shape[0]
    return l2_norm_sq(s - t.detach()) * (1.0 / batch)


def _weight_penalty(disc: Discriminator) -> Tensor:
    total = None
    for p in disc.parameters():
        term = l1_norm(p) + l2_norm_sq(p)
        total = term if total is None else total + term
    return total


def _validate_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {num_classes})")
    return labels


def adversarial_losses(
    disc: Discriminator,
    teacher_logits: Tensor,
    student_logits: Tensor,
    labels,
    weights: LossWeights,
    role: str,
):
    """One player's adversarial objective.

    Returns ``(loss, parts)`` where ``loss`` is the tensor to minimize and
    ``parts`` holds the float components (l_adv_o, l_reg, l_adv_c, l_adv).

    discriminator_step: both logit batches are detached; the discriminator
    learns to score teacher 1 / student 0, is penalized on its weight norms,
    is additionally fed student logits labeled as teacher (the confusion
    regularizer), and classifies both batches.

    student_step: the discriminator is frozen; the student earns the
    non-saturating fooling loss plus the class term on its own logits.
    """
    labels = _validate_labels(labels, disc.num_classes)
    if role == ROLE_DISCRIMINATOR:
        out_t = disc(teacher_logits.detach())
        out_s = disc(student_logits.detach())
        adv_o = binary_cross_entropy(out_t.real_score, 1.0) + binary_cross_entropy(
            out_s.real_score, 0.0
        )
        reg = weights.mu * (
            _weight_penalty(disc) + binary_cross_entropy(out_s.real_score, 1.0)
        )
        adv_c = cross_entropy(out_t.class_logits, labels) + cross_entropy(
            out_s.class_logits, labels
        )
        loss = adv_o + reg + adv_c
        reg_value = reg.item()
    elif role == ROLE_STUDENT:
        with frozen(disc):
            out_s = disc(student_logits)
            adv_o = binary_cross_entropy(out_s.real_score, 1.0)
            adv_c = cross_entropy(out_s.class_logits, labels)
            loss = adv_o + adv_c
        reg_value = 0.0
    else:
        raise ValueError(f"unknown role {role!r}")
    parts = {
        "l_adv_o": adv_o.item(),
        "l_reg": reg_value,
        "l_adv_c": adv_c.item(),
        "l_adv": loss.item(),
    }
    return loss, parts


def total_loss(
    role: str,
    weights: LossWeights,
    *,
    l_b: float = 0.0,
    l_adv_o: float = 0.0,
    l_reg: float = 0.0,
    l_adv_c: float = 0.0,
    l_is: float = 0.0,
) -> LossBundle:
    """Compose the logged bundle for one step, rejecting non-finite parts."""
    parts = {
        "l_b": float(l_b),
        "l_adv_o": float(l_adv_o),
        "l_reg": float(l_reg),
        "l_adv_c": float(l_adv_c),
        "l_is": float(l_is),
    }
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    l_adv = parts["l_adv_o"] + parts["l_reg"] + parts["l_adv_c"]
    total = (
        weights.lambda1 * parts["l_b"]
        + weights.lambda2 * l_adv
        + weights.lambda3 * parts["l_is"]
    )
    if not math.isfinite(total):
        raise NonFiniteLossError("total", total)
    return LossBundle(
        role=role,
        l_b=parts["l_b"],
        l_adv_o=parts["l_adv_o"],
        l_reg=parts["l_reg"],
        l_adv_c=parts["l_adv_c"],
        l_adv=l_adv,
        l_is=parts["l_is"],
        total=total,
    )
