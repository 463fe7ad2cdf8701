"""Fused prediction and the source-branch losses.

Every loss returns ``(value, gradient)`` with the gradient taken with respect
to the source logits ``s(z_F)`` of shape ``(B, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContractViolation
from .gaussian import Perspective, softmax

PROB_CLAMP = 1e-12


@dataclass
class BatchView:
    """One batch seen through all three perspectives.

    ``labels`` are carried for evaluation only; no adaptation path reads them.
    """

    features: Dict[Perspective, np.ndarray]
    source_logits: np.ndarray
    gda_scores: Dict[Perspective, np.ndarray] = field(default_factory=dict)
    labels: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.source_logits.shape[0]

    @property
    def src_posterior(self) -> np.ndarray:
        return softmax(self.source_logits, axis=1)

    def posterior(self, perspective: Perspective) -> np.ndarray:
        return softmax(self.gda_scores[Perspective(perspective)], axis=1)


def fused_logits(source_logits, gda_scores, lam=1.0) -> np.ndarray:
    """``l = s + lam * g_F``."""
    if lam < 0:
        raise ContractViolation("fusion weight must be nonnegative")
    s = np.asarray(source_logits, dtype=np.float64)
    g = np.asarray(gda_scores, dtype=np.float64)
    if s.shape != g.shape:
        raise ContractViolation(f"shape mismatch {s.shape} vs {g.shape}")
    if lam == 0:
        return s.copy()
    return s + lam * g


def predict(logits) -> np.ndarray:
    # np.argmax already breaks ties toward the lowest index
    return np.argmax(np.asarray(logits), axis=1)


def alignment_loss(p_lp, src_logits):
    """Cross-entropy of the (detached) GDA posterior against the source softmax."""
    p_lp = np.asarray(p_lp, dtype=np.float64)
    src_logits = np.asarray(src_logits, dtype=np.float64)
    if p_lp.shape != src_logits.shape:
        raise ContractViolation("p_lp and src_logits must share a shape")
    B = src_logits.shape[0]
    p_src = softmax(src_logits, axis=1)
    loss = -float(np.sum(p_lp * np.log(np.maximum(p_src, PROB_CLAMP)))) / B
    grad = (p_src - p_lp) / B
    return loss, grad


def confidence_reg(src_posterior):
    """Mean of ``-u log u`` over the batch, ``u`` being each row's top probability.

    Differentiated through the argmax coordinate only (lowest index on ties).
    """
    p = np.asarray(src_posterior, dtype=np.float64)
    B = p.shape[0]
    rows = np.arange(B)
    top = np.argmax(p, axis=1)
    u = np.maximum(p[rows, top], PROB_CLAMP)
    loss = -float(np.sum(u * np.log(u))) / B
    # d(-u log u)/du = -(log u + 1); du/ds_j = u (delta_jk - p_j)
    coef = -(np.log(u) + 1.0) * u / B
    onehot = np.zeros_like(p)
    onehot[rows, top] = 1.0
    grad = coef[:, None] * (onehot - p)
    return loss, grad


def balance_reg(src_posterior, sign=1.0):
    """``sign * (-sum_c q_c log q_c)`` with ``q = softmax(sum_i p_i)``."""
    p = np.asarray(src_posterior, dtype=np.float64)
    q = softmax(p.sum(axis=0))
    logq = np.log(np.maximum(q, PROB_CLAMP))
    loss = -sign * float(np.sum(q * logq))
    dq = -sign * (logq + 1.0)
    dP = q * (dq - q @ dq)
    # every row's posterior feeds the same summed vector
    grad = p * (dP[None, :] - (p @ dP)[:, None])
    return loss, grad


def entropy(probs, axis=-1) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return -np.sum(probs * np.log(np.maximum(probs, PROB_CLAMP)), axis=axis)
