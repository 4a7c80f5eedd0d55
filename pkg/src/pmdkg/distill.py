"""Teacher-to-student supervision signals and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autograd import Tensor, as_tensor, l2_normalize, log_softmax, softmax

GRID_STEP = 0.05


@dataclass(frozen=True)
class DistillWeights:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.alpha + self.beta > 1.0:
            raise ValueError(f"alpha + beta must not exceed 1 (got {self.alpha} + {self.beta})")

    @property
    def ce_weight(self) -> float:
        return 1.0 - self.alpha - self.beta


def weight_grid(low: float = 0.0, high: float = 0.5, step: float = GRID_STEP) -> list[float]:
    """Grid values low, low+step, ..., high rounded to the step's decimals."""
    n = int(round((high - low) / step))
    return [round(low + i * step, 10) for i in range(n + 1)]


@dataclass
class FeaturePair:
    """Teacher/student token features of one tower plus the shared mask of that tower."""

    teacher: Tensor | np.ndarray
    student: Tensor | np.ndarray
    masked: np.ndarray  # (B, T) bool


class MaskedFeatureLoss(NamedTuple):
    value: Tensor
    active: bool


def mgfd_loss(pairs: FeaturePair | Sequence[FeaturePair]) -> MaskedFeatureLoss:
    """Squared error between features at masked positions only.

    Each masked position contributes the mean over the feature dimension; the
    result averages over every masked position of every pair.  With nothing
    masked the loss is an exact zero and ``active`` is False.
    """
    if isinstance(pairs, FeaturePair):
        pairs = [pairs]
    total: Tensor | None = None
    count = 0
    for pair in pairs:
        s, t = as_tensor(pair.student), as_tensor(pair.teacher)
        if s.shape != t.shape:
            raise ValueError(f"feature shapes differ: {s.shape} vs {t.shape}")
        masked = np.asarray(pair.masked, dtype=bool)
        if masked.shape != s.shape[:2]:
            raise ValueError("mask shape does not match features")
        n = int(masked.sum())
        if n == 0:
            continue
        diff = s - t.data
        sq = (diff * diff).mean(axis=-1) * masked.astype(s.dtype)
        part = sq.sum()
        total = part if total is None else total + part
        count += n
    if total is None:
        dtype = as_tensor(pairs[0].student).dtype if pairs else np.float64
        return MaskedFeatureLoss(Tensor(np.zeros((), dtype=dtype)), False)
    return MaskedFeatureLoss(total * (1.0 / count), True)


def score_distill_loss(student, teacher, diagonal: bool = False) -> Tensor:
    """Mean squared error between raw (untempered) student and teacher cosine matrices."""
    s, t = as_tensor(student), as_tensor(teacher)
    if s.shape != t.shape:
        raise ValueError(f"score matrix shapes differ: {s.shape} vs {t.shape}")
    diff = s - t.data
    if diagonal:
        n = min(s.shape)
        eye = np.eye(s.shape[0], s.shape[1], dtype=s.dtype)
        return ((diff * diff) * eye).sum() * (1.0 / n)
    return (diff * diff).mean()


def combined_loss(
    ce, score, mgfd, weights: DistillWeights, mask_rate: float | None = None
) -> Tensor:
    """(1 - alpha - beta) * CE + alpha * SCORE + beta * MGFD.

    A zero mask rate forces beta to 0 (the CE weight becomes 1 - alpha).
    Terms with zero weight are dropped rather than multiplied by zero.
    """
    beta = 0.0 if mask_rate == 0.0 else weights.beta
    total = as_tensor(ce) * (1.0 - weights.alpha - beta)
    if weights.alpha:
        total = total + as_tensor(score) * weights.alpha
    if beta:
        total = total + as_tensor(mgfd) * beta
    return total


def lkd_loss(student, teacher, temperature: float = 2.0) -> Tensor:
    """Row-mean KL(softmax(teacher/T) || softmax(student/T)) scaled by T^2."""
    if temperature <= 0:
        raise ValueError("softening temperature must be positive")
    s, t = as_tensor(student), as_tensor(teacher)
    if s.shape != t.shape:
        raise ValueError(f"logit shapes differ: {s.shape} vs {t.shape}")
    inv = 1.0 / temperature
    p_t = softmax(Tensor(t.data * inv)).data
    log_p_t = log_softmax(Tensor(t.data * inv)).data
    log_p_s = log_softmax(s * inv)
    kl_rows = (Tensor(p_t * log_p_t) - log_p_s * p_t).sum(axis=-1)
    return kl_rows.mean() * (temperature * temperature)


def pkd_loss(
    student_layer_features: Sequence, teacher_layer_features: Sequence, layer_map: Sequence[int]
) -> Tensor:
    """MSE between L2-normalized pooled hidden states of mapped layer pairs.

    ``student_layer_features[j]`` (B, d) is matched with
    ``teacher_layer_features[layer_map[j]]``; the result averages over layers.
    """
    if len(layer_map) != len(student_layer_features):
        raise ValueError("every student layer needs a mapped teacher layer")
    total: Tensor | None = None
    for j, s in enumerate(student_layer_features):
        m = layer_map[j]
        if not 0 <= m < len(teacher_layer_features):
            raise ValueError(f"student layer {j} maps to missing teacher layer {m}")
        s = l2_normalize(as_tensor(s))
        t = l2_normalize(Tensor(as_tensor(teacher_layer_features[m]).data))
        diff = s - t
        term = (diff * diff).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no layers to distill")
    return total * (1.0 / len(layer_map))
