"""Progressive specialist weighting for expert distillation.

An expert is distilled from a generalist teacher over a fixed number of
epochs. Early on it behaves like the teacher everywhere; as training
progresses, samples whose true class lies in the expert's domain are
up-weighted linearly until they carry ``max_weight`` times the weight
of out-of-domain samples. The loss for each sample averages two hard
cross-entropy targets: the true label and the teacher's predicted
label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "WeightSchedule",
    "DistillBatch",
    "weighted_distill_loss",
    "hard_teacher_label",
]


@dataclass(frozen=True)
class WeightSchedule:
    """Linear ramp of the in-domain sample weight over training.

    ``max_weight`` is the in-domain weight at the final epoch;
    out-of-domain samples always weigh 1.
    """

    max_weight: float = 14.0
    total_epochs: int = 200

    def __post_init__(self):
        if not self.max_weight >= 1.0:
            raise ConfigError(f"max_weight must be >= 1, got {self.max_weight}")
        if not (isinstance(self.total_epochs, int) and self.total_epochs >= 1):
            raise ConfigError(f"total_epochs must be a positive integer, got {self.total_epochs}")

    def scaling_factor(self, epoch: float) -> float:
        """In-domain weight at the given epoch: 1 at 0, max_weight at the end."""
        if not 0 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch must lie in [0, {self.total_epochs}], got {epoch}")
        return 1.0 + (epoch / self.total_epochs) * (self.max_weight - 1.0)

    def sample_weight(self, epoch: float, in_domain) -> np.ndarray:
        """Per-sample weights: scaling_factor where in-domain, else 1."""
        scale = self.scaling_factor(epoch)
        return np.where(np.asarray(in_domain, dtype=bool), scale, 1.0)


@dataclass(frozen=True)
class DistillBatch:
    """One training batch as seen by the distillation loss."""

    student_logits: np.ndarray  # (B, N) float
    true_labels: np.ndarray  # (B,) int
    teacher_labels: np.ndarray  # (B,) int, teacher argmax
    in_domain: np.ndarray  # (B,) bool

    def __post_init__(self):
        z = np.asarray(self.student_logits, dtype=np.float64)
        if z.ndim != 2:
            raise ValueError("student_logits must be 2-D")
        b, n = z.shape
        for name in ("true_labels", "teacher_labels", "in_domain"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (b,):
                raise ValueError(f"{name} must have shape ({b},), got {arr.shape}")
        for name in ("true_labels", "teacher_labels"):
            arr = np.asarray(getattr(self, name))
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} contains class indices outside [0, {n})")
        object.__setattr__(self, "student_logits", z)
        object.__setattr__(self, "true_labels", np.asarray(self.true_labels, dtype=np.int64))
        object.__setattr__(self, "teacher_labels", np.asarray(self.teacher_labels, dtype=np.int64))
        object.__setattr__(self, "in_domain", np.asarray(self.in_domain, dtype=bool))


def hard_teacher_label(teacher_probs: np.ndarray) -> np.ndarray:
    """Teacher's hard label per row (first index on ties)."""
    return np.asarray(teacher_probs).argmax(axis=-1)


def weighted_distill_loss(
    schedule: WeightSchedule, epoch: float, batch: DistillBatch
) -> tuple[float, np.ndarray]:
    """Weighted two-target cross-entropy and its gradient in the logits.

    Per sample: w * (0.5 * CE(student, true) + 0.5 * CE(student, teacher))
    with natural-log cross entropy, summed over the batch (not averaged,
    so the weights keep their absolute meaning). Returns ``(loss,
    grad)`` where grad has the student_logits shape and equals
    w * (softmax(z) - 0.5 * (onehot(true) + onehot(teacher))) per row.
    """
    z = batch.student_logits
    b, n = z.shape
    w = schedule.sample_weight(epoch, batch.in_domain)

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - lse[:, None]
    rows = np.arange(b)
    ce_true = -log_p[rows, batch.true_labels]
    ce_teacher = -log_p[rows, batch.teacher_labels]
    loss = float(np.sum(w * 0.5 * (ce_true + ce_teacher)))

    target = np.zeros((b, n), dtype=np.float64)
    np.add.at(target, (rows, batch.true_labels), 0.5)
    np.add.at(target, (rows, batch.teacher_labels), 0.5)
    grad = w[:, None] * (np.exp(log_p) - target)
    return loss, grad
