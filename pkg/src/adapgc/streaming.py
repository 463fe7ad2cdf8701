"""Online maintenance of a perspective bank.

Per batch: responsibilities apportion each feature's moments across classes
(``batch_deltas``), the running totals absorb them and closed-form MLEs are
recomputed (``absorb_and_reestimate``), then the MLEs are EMA-blended into the
installed parameters (``ema_blend``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractViolation, RejectedBatch
from .gaussian import (
    DEFAULT_SHRINKAGE,
    ClassGaussian,
    Perspective,
    PerspectiveBank,
    SufficientStats,
    install_gaussian,
    mle_from_stats,
    normalize_priors,
    softmax,
    symmetrize,
)

DEFAULT_ALPHA = 0.9
N_MIN_COV = 2.0
N_MIN_MEAN = 1e-3


@dataclass
class HeadParams:
    """Frozen linear classifier ``s_c(z) = w_c^T z + b_c``."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ContractViolation("head weights must be (C, d) and biases (C,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ContractViolation("head parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features) -> np.ndarray:
        return np.asarray(features) @ self.weights.T + self.biases


@dataclass
class EmaState:
    """Blended (pre-shrinkage) parameters carried between batches."""

    alpha: float
    priors: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def copy(self) -> "EmaState":
        return EmaState(
            self.alpha, self.priors.copy(), self.means.copy(), self.covariances.copy()
        )


@dataclass(frozen=True)
class ClassEstimate:
    """Fresh MLE for one class. ``None`` fields mean *hold the previous value*."""

    prior: Optional[float]
    mean: Optional[np.ndarray]
    covariance: Optional[np.ndarray]

    @property
    def hold(self) -> bool:
        return self.mean is None


def init_from_head(
    head: HeadParams,
    perspective: Perspective = Perspective.FUSED,
    alpha: float = DEFAULT_ALPHA,
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> PerspectiveBank:
    """Bank whose initial scores equal the head logits up to a shared constant.

    mu_c = w_c, Sigma_c = I and log pi_c = b_c + ||w_c||^2 / 2 (log|I| = 0).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation("alpha must lie in [0, 1]")
    C, d = head.weights.shape
    log_priors = head.biases + 0.5 * np.sum(head.weights**2, axis=1)
    priors = normalize_priors(softmax(log_priors))
    eye = np.eye(d)
    params = tuple(
        ClassGaussian.build(priors[c], head.weights[c].copy(), eye.copy(), log_prior=log_priors[c])
        for c in range(C)
    )
    ema = EmaState(
        alpha=float(alpha),
        priors=priors.copy(),
        means=head.weights.copy(),
        covariances=np.repeat(eye[None], C, axis=0),
    )
    return PerspectiveBank(
        perspective=Perspective(perspective),
        dim=d,
        num_classes=C,
        stats=[SufficientStats.zeros(d) for _ in range(C)],
        params=params,
        ema=ema,
        shrinkage=float(shrinkage),
    )


def check_responsibilities(resp, batch_size=None, tol=1e-9) -> np.ndarray:
    resp = np.asarray(resp, dtype=np.float64)
    if resp.ndim != 2:
        raise RejectedBatch("responsibilities must be a (B, C) matrix")
    if batch_size is not None and resp.shape[0] != batch_size:
        raise RejectedBatch(
            f"responsibilities have {resp.shape[0]} rows for a batch of {batch_size}"
        )
    if not np.all(np.isfinite(resp)) or np.any(resp < 0):
        raise RejectedBatch("responsibilities must be finite and nonnegative")
    bad = np.flatnonzero(np.abs(resp.sum(axis=1) - 1.0) > tol)
    if bad.size:
        raise RejectedBatch(f"responsibility row {bad[0]} does not sum to 1")
    return resp


def batch_deltas(features, resp):
    """Responsibility-weighted moments ``(dN, dS, dQ)`` of shapes (C,), (C, d), (C, d, d)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ContractViolation("features must be a (B, d) matrix")
    resp = check_responsibilities(resp, features.shape[0])
    d_count = resp.sum(axis=0)
    d_first = resp.T @ features
    d_second = np.einsum("ic,id,ie->cde", resp, features, features)
    d_second = 0.5 * (d_second + np.transpose(d_second, (0, 2, 1)))
    return d_count, d_first, d_second


def absorb_and_reestimate(
    bank: PerspectiveBank,
    deltas,
    n_min_cov: float = N_MIN_COV,
    n_min_mean: float = N_MIN_MEAN,
) -> List[ClassEstimate]:
    """Add ``deltas`` to the running totals and return per-class MLEs.

    Classes below ``n_min_mean`` accumulated mass hold everything; below
    ``n_min_cov`` only the covariance is held.
    """
    d_count, d_first, d_second = deltas
    if len(d_count) != bank.num_classes:
        raise ContractViolation("deltas do not match the bank's class count")
    for c, stats in enumerate(bank.stats):
        stats.add(d_count[c], d_first[c], d_second[c])
    total = float(sum(s.count for s in bank.stats))
    estimates = []
    for stats in bank.stats:
        if stats.count < n_min_mean or total <= 0:
            estimates.append(ClassEstimate(None, None, None))
            continue
        prior, mean, cov = mle_from_stats(stats, total)
        estimates.append(ClassEstimate(prior, mean, cov if stats.count >= n_min_cov else None))
    return estimates


def blend(previous, fresh, alpha):
    return alpha * previous + (1.0 - alpha) * fresh


def ema_blend(bank: PerspectiveBank, estimates: Sequence[ClassEstimate]) -> PerspectiveBank:
    """Blend fresh MLEs into the bank's EMA state and install shrunk parameters.

    Held fields keep their previous installed values exactly (including the
    cached factor); priors are renormalized across classes afterwards.
    """
    state: EmaState = bank.ema
    if state is None:
        raise ContractViolation("bank has no EMA state; build it with init_from_head")
    alpha = state.alpha
    new = state.copy()
    for c, est in enumerate(estimates):
        if est.hold:
            continue
        new.priors[c] = blend(state.priors[c], est.prior, alpha)
        new.means[c] = blend(state.means[c], est.mean, alpha)
        if est.covariance is not None:
            new.covariances[c] = symmetrize(blend(state.covariances[c], est.covariance, alpha))
    new.priors = normalize_priors(new.priors)

    params = []
    for c, (prev, est) in enumerate(zip(bank.params, estimates)):
        prior = float(new.priors[c])
        if est.hold:
            params.append(dataclasses.replace(prev, prior=prior, log_prior=float(np.log(prior))))
        elif est.covariance is None or np.array_equal(new.covariances[c], state.covariances[c]):
            params.append(
                dataclasses.replace(
                    prev, prior=prior, log_prior=float(np.log(prior)), mean=new.means[c].copy()
                )
            )
        else:
            params.append(
                install_gaussian(prior, new.means[c].copy(), new.covariances[c], bank.shrinkage, c)
            )
    bank.ema = new
    bank.params = tuple(params)
    bank.updates += 1
    return bank


def update_bank(bank: PerspectiveBank, features, resp, **kwargs) -> PerspectiveBank:
    """Full per-batch pipeline: deltas, absorb, MLE, EMA blend."""
    estimates = absorb_and_reestimate(bank, batch_deltas(features, resp), **kwargs)
    return ema_blend(bank, estimates)
