"""Response-based distillation: vanilla KD on the step-averaged output, step-wise KD per step.

Distributions are laid out as ``(T2, B, classes)`` for the student and
``(B, classes)`` for the teacher.  The numpy functions return floats; the
``*_t`` variants build differentiable graphs from student logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

EPS = 1e-12
MODES = ("none", "kd", "skd")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "skd"
    lambda_skd: float = 1.0
    temperature: float = 4.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_skd < 0:
            raise ValueError("lambda_skd must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class StepDistributions:
    student: np.ndarray   # (T2, B, classes)
    teacher: np.ndarray   # (B, classes)
    temperature: float = 1.0

    def __post_init__(self):
        self.student = np.asarray(self.student, dtype=np.float64)
        self.teacher = np.asarray(self.teacher, dtype=np.float64)
        if self.student.ndim == 2:
            self.student = self.student[:, None, :]
        if self.teacher.ndim == 1:
            self.teacher = self.teacher[None, :]
        if self.student.shape[1:] != self.teacher.shape:
            raise ValueError(f"student {self.student.shape} and teacher {self.teacher.shape} disagree")
        for name, d in (("student", self.student), ("teacher", self.teacher)):
            if (d < 0).any() or not np.allclose(d.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
                raise ValueError(f"{name} rows are not probability distributions")

    @property
    def steps(self) -> int:
        return self.student.shape[0]


def _xlogx_over(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    q = np.maximum(q, EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl(p, q) -> float:
    """KL(p || q) = sum_i p_i log(p_i / q_i) with 0 log 0 = 0 and q floored at EPS."""
    return float(np.mean(_xlogx_over(np.asarray(p, float), np.asarray(q, float))))


def kd_loss(student_steps, teacher) -> float:
    """KL(teacher || mean_t student_t), averaged over the batch."""
    d = StepDistributions(student_steps, teacher)
    return float(np.mean(_xlogx_over(d.teacher, d.student.mean(axis=0))))


def skd_loss(student_steps, teacher) -> float:
    """mean_t KL(teacher || student_t), averaged over the batch."""
    d = StepDistributions(student_steps, teacher)
    return float(np.mean(_xlogx_over(d.teacher[None], d.student)))


# differentiable versions ----------------------------------------------------

def _teacher_entropy_term(teacher: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.where(teacher > 0, teacher * np.log(np.where(teacher > 0, teacher, 1.0)), 0.0).sum())


def kl_t(teacher: np.ndarray, q: Tensor) -> Tensor:
    """Batch-mean KL(teacher || q) for a (B, classes) probability tensor."""
    b = teacher.shape[0]
    cross = tn.sum(tn.mul(tn.log(tn.clamp_min(q, EPS)), teacher))
    return tn.scale(tn.sub(_teacher_entropy_term(teacher), cross), 1.0 / b)


def step_probs(logits_steps: Sequence[Tensor], temperature: float = 1.0) -> list[Tensor]:
    if temperature == 1.0:
        return [tn.softmax(o, axis=-1) for o in logits_steps]
    return [tn.softmax(tn.scale(o, 1.0 / temperature), axis=-1) for o in logits_steps]


def kd_loss_t(logits_steps: Sequence[Tensor], teacher: np.ndarray, temperature: float) -> Tensor:
    probs = step_probs(logits_steps, temperature)
    return kl_t(teacher, tn.mean(tn.stack(probs), axis=0))


def skd_loss_t(logits_steps: Sequence[Tensor], teacher: np.ndarray, temperature: float) -> Tensor:
    probs = step_probs(logits_steps, temperature)
    terms = [kl_t(teacher, q) for q in probs]
    return tn.scale(tn.sum(tn.stack(terms)), 1.0 / len(terms))


def averaged_ce(logits_steps: Sequence[Tensor], labels) -> Tensor:
    """Cross-entropy of the step-averaged (temperature 1) probability."""
    mean_p = tn.mean(tn.stack(step_probs(logits_steps, 1.0)), axis=0)
    return tn.cross_entropy_from_probs(mean_p, labels, eps=EPS)


def combined_loss(logits_steps: Sequence[Tensor], labels, teacher: np.ndarray | None,
                  cfg: LossConfig) -> Tensor:
    """CE on the averaged output plus lambda times the selected distillation term."""
    logits_steps = list(logits_steps)
    loss = averaged_ce(logits_steps, labels)
    if cfg.mode == "none" or cfg.lambda_skd == 0:
        return loss
    if teacher is None:
        raise ValueError(f"loss mode {cfg.mode!r} needs teacher probabilities")
    teacher = np.asarray(teacher, dtype=np.float64)
    term = (skd_loss_t if cfg.mode == "skd" else kd_loss_t)(logits_steps, teacher, cfg.temperature)
    return tn.add(loss, tn.scale(term, cfg.lambda_skd))
