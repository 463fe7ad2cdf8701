"""Closed-form Gaussian machinery for per-class discriminant models.

Scores follow the quadratic discriminant

    g_c(z) = -1/2 (z - mu_c)^T Sigma_c^{-1} (z - mu_c) - 1/2 log|Sigma_c| + log pi_c

with the class-independent ``-(d/2) log 2 pi`` dropped. The Mahalanobis term is
always evaluated through the cached Cholesky factor.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Any, List, Tuple

import numpy as np
from scipy import linalg

from .errors import ContractViolation, EmptyClass, NumericalDegeneracy, RejectedInput

DEFAULT_SHRINKAGE = 1e-4
PRIOR_FLOOR = 1e-8
SHRINK_RETRIES = 8


class Perspective(enum.IntEnum):
    """The three scored views: modality 1, modality 2 and the fused feature."""

    M1 = 0
    M2 = 1
    FUSED = 2


def softmax(scores, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores, axis=-1):
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def symmetrize(m):
    return 0.5 * (m + m.T)


@dataclass
class SufficientStats:
    """Streaming moments of one class: soft count N, sum S and outer-product sum Q."""

    count: float
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "SufficientStats":
        return cls(0.0, np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def from_samples(cls, samples, weights=None) -> "SufficientStats":
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if weights is None:
            weights = np.ones(samples.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        stats = cls.zeros(samples.shape[1])
        stats.add(
            float(weights.sum()),
            weights @ samples,
            (samples * weights[:, None]).T @ samples,
        )
        return stats

    @property
    def dim(self) -> int:
        return self.first_moment.shape[0]

    def add(self, d_count, d_first, d_second) -> None:
        """Accumulate a delta in place; Q is re-symmetrized afterwards."""
        self.count = float(self.count + d_count)
        self.first_moment = self.first_moment + np.asarray(d_first, dtype=np.float64)
        self.second_moment = symmetrize(
            self.second_moment + np.asarray(d_second, dtype=np.float64)
        )

    def copy(self) -> "SufficientStats":
        return SufficientStats(
            self.count, self.first_moment.copy(), self.second_moment.copy()
        )


@dataclass(frozen=True)
class ClassGaussian:
    """Installed parameters of one class.

    ``log_prior`` is the value entering the score. It equals ``log(prior)``
    except right after head initialization, where it holds the unnormalized
    bias-absorbing log prior.
    """

    prior: float
    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray
    log_det: float
    log_prior: float
    shrinkage: float = 0.0

    @classmethod
    def build(cls, prior, mean, covariance, log_prior=None, shrinkage=0.0, class_index=None):
        covariance = np.asarray(covariance, dtype=np.float64)
        try:
            chol = linalg.cholesky(covariance, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalDegeneracy(
                f"covariance of class {class_index} is not positive definite",
                class_index=class_index,
            ) from exc
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        if log_prior is None:
            log_prior = float(np.log(prior))
        return cls(
            prior=float(prior),
            mean=np.asarray(mean, dtype=np.float64),
            covariance=covariance,
            chol=chol,
            log_det=log_det,
            log_prior=float(log_prior),
            shrinkage=float(shrinkage),
        )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class PerspectiveBank:
    """Per-class Gaussian model of one perspective.

    ``params`` is replaced wholesale (never mutated element-wise) so a reader
    holding a reference from :meth:`snapshot` never sees a half-updated bank.
    ``ema`` holds the streaming module's blended state.
    """

    perspective: Perspective
    dim: int
    num_classes: int
    stats: List[SufficientStats]
    params: Tuple[ClassGaussian, ...]
    ema: Any = None
    updates: int = 0
    shrinkage: float = DEFAULT_SHRINKAGE

    def __post_init__(self):
        if len(self.stats) != self.num_classes or len(self.params) != self.num_classes:
            raise ContractViolation("bank must hold exactly num_classes stats and params")
        for s, p in zip(self.stats, self.params):
            if s.dim != self.dim or p.dim != self.dim:
                raise ContractViolation("per-class dimension differs from bank dim")
        self.params = tuple(self.params)

    def snapshot(self) -> "PerspectiveBank":
        return copy.deepcopy(self)

    @property
    def priors(self) -> np.ndarray:
        return np.array([p.prior for p in self.params])

    @property
    def means(self) -> np.ndarray:
        return np.stack([p.mean for p in self.params])

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([p.covariance for p in self.params])


def _check_vector(z, dim):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != dim:
        raise ContractViolation(f"expected vector of length {dim}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise RejectedInput("feature vector has non-finite coordinates")
    return z


def quad_score(z, g: ClassGaussian) -> float:
    """Quadratic discriminant score of a single vector under one class."""
    z = _check_vector(z, g.dim)
    y = linalg.solve_triangular(g.chol, z - g.mean, lower=True)
    return float(-0.5 * (y @ y) - 0.5 * g.log_det + g.log_prior)


def quad_scores(features, bank: PerspectiveBank) -> np.ndarray:
    """Scores for a whole batch: ``(B, d)`` features to ``(B, C)`` scores."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != bank.dim:
        raise ContractViolation(
            f"expected features of shape (B, {bank.dim}), got {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise RejectedInput("features contain non-finite coordinates")
    out = np.empty((features.shape[0], bank.num_classes))
    for c, g in enumerate(bank.params):
        y = linalg.solve_triangular(g.chol, (features - g.mean).T, lower=True)
        out[:, c] = -0.5 * np.sum(y * y, axis=0) - 0.5 * g.log_det + g.log_prior
    return out


def posterior(z, bank: PerspectiveBank) -> np.ndarray:
    """Class posterior ``softmax_c g_c(z)``; accepts a vector or a ``(B, d)`` batch."""
    z = np.asarray(z, dtype=np.float64)
    probs = softmax(quad_scores(z, bank), axis=1)
    return probs[0] if z.ndim == 1 else probs


def mle_from_stats(stats: SufficientStats, total_count: float):
    """Recover ``(prior, mean, covariance)`` from sufficient statistics.

    The covariance ``Q/N - mu mu^T`` is symmetrized but not shrunk.
    """
    if stats.count <= 0:
        raise EmptyClass()
    if total_count < stats.count:
        raise ContractViolation("total_count must be >= the class count")
    prior = stats.count / total_count
    mean = stats.first_moment / stats.count
    cov = stats.second_moment / stats.count - np.outer(mean, mean)
    return float(prior), mean, symmetrize(cov)


def _shrink_and_factor(sigma, eps, class_index=None):
    sigma = symmetrize(np.asarray(sigma, dtype=np.float64))
    eye = np.eye(sigma.shape[0])
    for _ in range(SHRINK_RETRIES + 1):
        shrunk = sigma + eps * eye
        try:
            chol = linalg.cholesky(shrunk, lower=True)
            return shrunk, chol, eps
        except linalg.LinAlgError:
            eps *= 2.0
    lam_min = float(np.linalg.eigvalsh(sigma)[0])
    raise NumericalDegeneracy(
        f"covariance of class {class_index} not factorizable after {SHRINK_RETRIES} "
        f"shrinkage doublings (min eigenvalue {lam_min:.3e})",
        class_index=class_index,
    )


def shrink_covariance(sigma, eps=DEFAULT_SHRINKAGE, class_index=None) -> np.ndarray:
    """Return ``sigma + eps*I``, doubling ``eps`` until a Cholesky factor exists."""
    if eps <= 0:
        raise ContractViolation("shrinkage must be positive")
    return _shrink_and_factor(sigma, eps, class_index)[0]


def install_gaussian(prior, mean, covariance, eps, class_index=None, log_prior=None) -> ClassGaussian:
    """Shrink ``covariance`` and build the cached class parameters."""
    shrunk, chol, used = _shrink_and_factor(covariance, eps, class_index)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return ClassGaussian(
        prior=float(prior),
        mean=np.asarray(mean, dtype=np.float64),
        covariance=shrunk,
        chol=chol,
        log_det=log_det,
        log_prior=float(np.log(prior)) if log_prior is None else float(log_prior),
        shrinkage=used,
    )


def normalize_priors(priors, floor=PRIOR_FLOOR) -> np.ndarray:
    """Normalize, clamp below at ``floor`` and renormalize."""
    priors = np.asarray(priors, dtype=np.float64)
    priors = priors / priors.sum()
    priors = np.maximum(priors, floor)
    return priors / priors.sum()


def cov_deviations(bank: PerspectiveBank):
    """Mean covariance across classes and each class's deviation from it."""
    covs = bank.covariances
    mean_cov = covs.mean(axis=0)
    return mean_cov, covs - mean_cov[None, :, :]
