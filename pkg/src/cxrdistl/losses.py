"""Losses and scalar schedules for supervised pretraining, distillation and correction."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SYMPTOMS

log = logging.getLogger(__name__)


# --- DINO ---------------------------------------------------------------------

def dino_loss(student_out: Sequence[torch.Tensor], teacher_out: Sequence[torch.Tensor],
              center: torch.Tensor, teacher_temp: float, student_temp: float = 0.1) -> torch.Tensor:
    """Cross-entropy between centred/sharpened teacher softmax and student log-softmax.

    Averaged over every (teacher global view, student view) pair except a
    global view paired with itself. Teacher outputs are detached.
    """
    if teacher_temp <= 0 or student_temp <= 0:
        raise ValueError("temperatures must be positive")
    targets = [F.softmax((t.detach() - center) / teacher_temp, dim=-1) for t in teacher_out]
    log_probs = [F.log_softmax(s / student_temp, dim=-1) for s in student_out]
    total, n_pairs = 0.0, 0
    for ti, q in enumerate(targets):
        for si, lp in enumerate(log_probs):
            if si == ti:
                continue
            total = total + torch.sum(-q * lp, dim=-1).mean()
            n_pairs += 1
    if n_pairs == 0:
        raise ValueError("dino_loss needs at least one teacher/student pair")
    return total / n_pairs


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_out: Sequence[torch.Tensor], momentum: float = 0.9) -> torch.Tensor:
    batch_center = torch.cat([t.detach() for t in teacher_out]).mean(dim=0)
    return center * momentum + batch_center * (1 - momentum)


def teacher_temp_schedule(step: int, total: int, start: float = 0.04, end: float = 0.07,
                          warmup_frac: float = 0.1) -> float:
    """Linear warm-up of the teacher temperature over the first ``warmup_frac`` of steps."""
    warm = int(warmup_frac * total)
    if warm <= 0 or step >= warm:
        return end
    return start + (end - start) * step / warm


@dataclass
class DinoState:
    center: torch.Tensor
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    warmup_frac: float = 0.1

    @classmethod
    def zeros(cls, out_dim: int, **kw) -> "DinoState":
        return cls(torch.zeros(out_dim), **kw)

    def teacher_temp(self, step: int, total: int) -> float:
        return teacher_temp_schedule(step, total, self.teacher_temp_start, self.teacher_temp_end,
                                     self.warmup_frac)

    def loss(self, student_out, teacher_out, step: int, total: int) -> torch.Tensor:
        """Loss for this step, then the centre is advanced (in place on the state)."""
        center = self.center.to(teacher_out[0].dtype)
        value = dino_loss(student_out, teacher_out, center, self.teacher_temp(step, total), self.student_temp)
        self.center = update_center(center, teacher_out, self.center_momentum)
        return value


# --- distillation / supervised losses ------------------------------------------

def kl_distill(student_logits: torch.Tensor, teacher_logits: torch.Tensor, tau: float = 2.0) -> torch.Tensor:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)), batch mean."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_q = F.log_softmax(teacher_logits.detach() / tau, dim=-1)
    log_p = F.log_softmax(student_logits / tau, dim=-1)
    kl = torch.sum(log_q.exp() * (log_q - log_p), dim=-1)
    return tau ** 2 * kl.mean()


def focal_bce(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
              pos_weight: torch.Tensor | Sequence[float] | None = None,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Focal binary cross-entropy with per-label positive weights.

    ``targets`` may be hard 0/1 labels or soft teacher probabilities. ``mask``
    (same shape, or one flag per row) marks which elements count; the result is
    the mean over counted elements, and 0 if none count.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    targets = targets.to(logits.dtype)
    if pos_weight is None:
        w = torch.ones(logits.shape[-1], dtype=logits.dtype)
    else:
        w = torch.as_tensor(pos_weight, dtype=logits.dtype)
        if (w < 0).any():
            raise ValueError("pos_weight must be non-negative")
    p = torch.sigmoid(logits)
    log_p = -F.softplus(-logits)
    log_1mp = -F.softplus(logits)
    pos = w * targets * (1 - p) ** gamma * (-log_p)
    neg = (1 - targets) * p ** gamma * (-log_1mp)
    per = pos + neg
    if mask is None:
        return per.mean()
    mask = mask.to(logits.dtype)
    if mask.ndim == 1:
        mask = mask[:, None].expand_as(per)
    denom = mask.sum()
    if denom == 0:
        return (per * 0).sum()
    return (per * mask).sum() / denom


def disease_ce(logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted cross-entropy; label -1 means unlabeled and is ignored."""
    if (labels >= 0).sum() == 0:
        return (logits * 0).sum()
    w = None if class_weights is None else class_weights.to(logits.dtype)
    return F.cross_entropy(logits, labels, weight=w, ignore_index=-1)


def inverse_frequency_weights(labels: Sequence[int], n_classes: int = 3) -> torch.Tensor:
    """N / (C * n_c) per class; classes absent from ``labels`` get weight 1."""
    counts = [0] * n_classes
    for y in labels:
        if y >= 0:
            counts[y] += 1
    total = sum(counts)
    return torch.tensor([total / (n_classes * c) if c else 1.0 for c in counts], dtype=torch.float64)


# --- positive weights -------------------------------------------------------------

class PosWeightMode(str, enum.Enum):
    PHASE1 = "PHASE1"
    CORRECTION = "CORRECTION"


@dataclass(frozen=True)
class PosWeightPolicy:
    mode: PosWeightMode = PosWeightMode.PHASE1
    clip: float = 50.0
    rare_boost: float = 1.5
    boost_cap: float = 75.0
    rare_labels: tuple[str, ...] = ("pneumothorax", "consolidation")

    @classmethod
    def phase1(cls, **kw) -> "PosWeightPolicy":
        return cls(PosWeightMode.PHASE1, **{"clip": 50.0, **kw})

    @classmethod
    def correction(cls, clip: float = 20.0) -> "PosWeightPolicy":
        return cls(PosWeightMode.CORRECTION, clip=clip, rare_boost=1.0, boost_cap=clip, rare_labels=())


def pos_weights(n_pos: Sequence[int], n_neg: Sequence[int], policy: PosWeightPolicy,
                labels: Sequence[str] = SYMPTOMS) -> list[float]:
    out = []
    for name, pos, neg in zip(labels, n_pos, n_neg):
        if pos == 0:
            log.warning("no positives for %s in the labeled partition; pos_weight = clip", name)
            out.append(float(policy.clip))
            continue
        w = min(policy.clip, neg / pos)
        if policy.mode is PosWeightMode.PHASE1 and name in policy.rare_labels:
            w = min(policy.boost_cap, w * policy.rare_boost)
        out.append(float(w))
    return out


def label_counts(symptom_rows: Sequence[Sequence[bool] | None]) -> tuple[list[int], list[int]]:
    """Positive and negative counts per label over rows that carry symptom labels."""
    rows = [r for r in symptom_rows if r is not None]
    n_pos = [sum(int(r[j]) for r in rows) for j in range(len(SYMPTOMS))]
    return n_pos, [len(rows) - p for p in n_pos]


# --- mixing -----------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    phase1_disease: float = 0.25
    phase1_symptom: float = 0.75
    lambda_mix: float = 0.5
    distill_halves: tuple[float, float] = (0.5, 0.5)
    kl_temp: float = 2.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if not math.isclose(self.phase1_disease + self.phase1_symptom, 1.0):
            raise ValueError("phase-1 weights must sum to 1")
        if not 0 <= self.lambda_mix <= 1:
            raise ValueError("lambda must be in [0, 1]")


def _need(parts: Mapping, names: Sequence[str], phase) -> list:
    missing = [n for n in names if parts.get(n) is None]
    if missing:
        raise ValueError(f"phase {phase}: missing loss component(s) {', '.join(missing)}")
    return [parts[n] for n in names]


def distill_loss(kl, focal, weights: LossWeights = LossWeights()):
    a, b = weights.distill_halves
    return a * kl + b * focal


def combined_loss(phase, epoch: int, parts: Mapping, weights: LossWeights = LossWeights(),
                  ssl_epoch: int | None = None):
    """Total loss for the active phase.

    phase 1 / "correction": parts ``disease`` and ``focal``.
    phase 2: parts ``kl`` and ``focal``, plus ``dino`` while ``epoch < ssl_epoch``.
    """
    if phase in (1, "1", "correction"):
        disease, focal = _need(parts, ["disease", "focal"], phase)
        return weights.phase1_disease * disease + weights.phase1_symptom * focal
    if phase in (2, "2"):
        kl, focal = _need(parts, ["kl", "focal"], phase)
        distill = distill_loss(kl, focal, weights)
        if ssl_epoch is not None and epoch < ssl_epoch:
            (dino,) = _need(parts, ["dino"], phase)
            return weights.lambda_mix * dino + (1 - weights.lambda_mix) * distill
        return distill
    raise ValueError(f"unknown phase {phase!r}")


# --- schedules ----------------------------------------------------------------------

def _cosine(k: int, K: int, start: float, end: float) -> float:
    if K <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= k <= K:
        raise ValueError(f"step {k} outside [0, {K}]")
    return end + (start - end) * (1 + math.cos(math.pi * k / K)) / 2


def ema_momentum(k: int, K: int, start: float = 0.9995, end: float = 1.0) -> float:
    return _cosine(k, K, start, end)


def lr_schedule(k: int, K: int, start: float = 5e-5, end: float = 1e-6) -> float:
    return _cosine(k, K, start, end)


@torch.no_grad()
def ema_update(teacher: nn.Module | Mapping[str, torch.Tensor], student: nn.Module | Mapping[str, torch.Tensor],
               m: float) -> None:
    """In place: teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    if not 0 <= m <= 1:
        raise ValueError(f"EMA momentum {m} outside [0, 1]")
    t = dict(teacher.named_parameters()) if isinstance(teacher, nn.Module) else teacher
    s = dict(student.named_parameters()) if isinstance(student, nn.Module) else student
    if t.keys() != s.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, tp in t.items():
        sp = s[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        # lerp == m*t + (1-m)*s, but the delta (1-m)*(s-t) is rounded only once
        tp.lerp_(sp.detach(), 1 - m)


@dataclass
class LossReport:
    total: float
    dino: float | None = None
    kl: float | None = None
    focal: float | None = None
    disease: float | None = None
    extra: dict = field(default_factory=dict)
