"""Cosine scoring and the contrastive cross-entropy objective."""

from __future__ import annotations

import numpy as np

from .autograd import NonFiniteError, Tensor, as_tensor, log_softmax

DEFAULT_TEMPERATURE = 0.05


def cosine_score(e_hr, e_t) -> float:
    a = np.asarray(e_hr, dtype=np.float64)
    b = np.asarray(e_t, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score of a zero vector is undefined")
    return float(a @ b / (na * nb))


def _normalize_rows(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq.data == 0.0):
        raise ValueError("zero-norm embedding row (degenerate encoder output)")
    return x / sq.sqrt()


def cosine_matrix(hr, tails) -> Tensor:
    """Raw cosine similarities, shape (B, C)."""
    hr, tails = as_tensor(hr), as_tensor(tails)
    return _normalize_rows(hr) @ _normalize_rows(tails).T


def score_matrix(hr, tails, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return cosine_matrix(hr, tails) * (1.0 / temperature)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean over rows of -log softmax(row)[label]."""
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite entries in score matrix")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels must be one valid column index per row")
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    return -(log_softmax(logits) * onehot).sum() * (1.0 / b)
