"""Modality reliability detection and one-sided contrastive rectification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, RejectedSample
from .fusion import PROB_CLAMP, BatchView
from .gaussian import Perspective, log_softmax

DEFAULT_TAU = 0.05


def _clean(p):
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_CLAMP)
    return p / p.sum(axis=-1, keepdims=True)


def symmetric_kl(p, q):
    """Average of the two directed KL divergences; works row-wise on batches.

    Written as ``1/2 sum (p - q)(log p - log q)``, which makes the result
    bitwise symmetric and termwise nonnegative.
    """
    p, q = _clean(p), _clean(q)
    if p.shape != q.shape:
        raise ContractViolation("distributions must share a shape")
    out = 0.5 * np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ReliabilityPartition:
    """``in_m1[i]`` is True when modality 1 of sample ``i`` is flagged as shifted."""

    in_m1: np.ndarray
    discrepancies: np.ndarray

    @property
    def set_m1(self) -> np.ndarray:
        return np.flatnonzero(self.in_m1)

    @property
    def set_m2(self) -> np.ndarray:
        return np.flatnonzero(~self.in_m1)

    @property
    def counts(self):
        n1 = int(self.in_m1.sum())
        return n1, int(self.in_m1.size - n1)


def partition_from_posteriors(post_m1, post_m2, post_fused) -> ReliabilityPartition:
    d1 = np.atleast_1d(symmetric_kl(post_m1, post_fused))
    d2 = np.atleast_1d(symmetric_kl(post_m2, post_fused))
    return partition_from_discrepancies(np.stack([d1, d2], axis=1))


def partition_from_discrepancies(discrepancies) -> ReliabilityPartition:
    D = np.asarray(discrepancies, dtype=np.float64)
    # ties go to the modality-2 set
    return ReliabilityPartition(in_m1=D[:, 1] < D[:, 0], discrepancies=D)


def reliability_partition(batch: BatchView, use_head_posteriors=False, head=None) -> ReliabilityPartition:
    """Partition a batch by comparing each uni-modal posterior with the fused GDA posterior.

    With ``use_head_posteriors`` the uni-modal views are scored by ``head``
    instead of their GDA banks.
    """
    fused = batch.posterior(Perspective.FUSED)
    if use_head_posteriors:
        if head is None:
            raise ContractViolation("head posteriors requested but no head given")
        p1 = np.exp(log_softmax(head.logits(batch.features[Perspective.M1]), axis=1))
        p2 = np.exp(log_softmax(head.logits(batch.features[Perspective.M2]), axis=1))
    else:
        p1 = batch.posterior(Perspective.M1)
        p2 = batch.posterior(Perspective.M2)
    return partition_from_posteriors(p1, p2, fused)


def _normalize(z, name):
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise RejectedSample(f"{name} feature {bad[0]} has zero norm", index=int(bad[0]))
    return z / norms[:, None], norms


def one_sided_infonce(z_m1, z_m2, partition: ReliabilityPartition, tau=DEFAULT_TAU, targets=None):
    """One-sided InfoNCE averaged over the batch.

    Each flagged feature is the anchor; the other modality's normalized
    features are stop-gradient positives/negatives. ``targets`` optionally
    supplies separate ``(z_m1, z_m2)`` arrays for the stop-gradient side,
    which is how finite-difference checks freeze it.

    Returns ``(loss, grad_m1, grad_m2)``; gradients are nonzero only on the
    anchor rows of each modality.
    """
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    z_m1 = np.asarray(z_m1, dtype=np.float64)
    z_m2 = np.asarray(z_m2, dtype=np.float64)
    if z_m1.shape != z_m2.shape or z_m1.ndim != 2:
        raise ContractViolation("modality features must both be (B, d)")
    B = z_m1.shape[0]
    in_m1 = np.asarray(partition.in_m1, dtype=bool)
    if in_m1.shape != (B,):
        raise ContractViolation("partition size does not match the batch")
    t_m1, t_m2 = (z_m1, z_m2) if targets is None else targets

    u1, n1 = _normalize(z_m1, "modality-1")
    u2, n2 = _normalize(z_m2, "modality-2")
    t1, _ = _normalize(np.asarray(t_m1, dtype=np.float64), "modality-1")
    t2, _ = _normalize(np.asarray(t_m2, dtype=np.float64), "modality-2")

    anchors = np.where(in_m1[:, None], u1, u2)
    norms = np.where(in_m1, n1, n2)
    logits = np.where(in_m1[:, None], anchors @ t2.T, anchors @ t1.T) / tau
    logp = log_softmax(logits, axis=1)
    rows = np.arange(B)
    loss = -float(np.sum(logp[rows, rows])) / B

    w = np.exp(logp)
    w[rows, rows] -= 1.0
    d_anchor = np.where(in_m1[:, None], w @ t2, w @ t1) / (tau * B)
    # through u = z/|z|: J = (I - u u^T)/|z|
    d_raw = (d_anchor - anchors * np.sum(anchors * d_anchor, axis=1, keepdims=True)) / norms[:, None]
    grad_m1 = np.where(in_m1[:, None], d_raw, 0.0)
    grad_m2 = np.where(in_m1[:, None], 0.0, d_raw)
    return loss, grad_m1, grad_m2
