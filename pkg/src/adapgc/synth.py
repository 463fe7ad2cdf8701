"""Seeded two-modality classification streams with asymmetric corruption.

Every sample ``i`` is drawn from its own generator keyed by ``(seed, i)``, in
a fixed order: label uniform, modality-1 normals, modality-2 normals, then
corruption noise. Consequently generation is a pure function of
``(spec, index)``, and changing the corruption never perturbs the clean draws.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

TARGETS = ("M1", "M2", "NONE", "BOTH")
KINDS = ("additive-gaussian", "mean-shift", "scale")


@dataclass
class Corruption:
    target: str = "NONE"
    kind: str = "additive-gaussian"
    severity: float = 0.0
    direction: Optional[list] = None  # mean-shift only; defaults to the all-ones direction

    def validate(self):
        if self.target not in TARGETS:
            raise ConfigError(f"must be one of {TARGETS}", "corruption.target")
        if self.kind not in KINDS:
            raise ConfigError(f"must be one of {KINDS}", "corruption.kind")
        if not np.isfinite(self.severity) or self.severity < 0:
            raise ConfigError("must be a finite nonnegative number", "corruption.severity")


@dataclass
class ModalitySpec:
    means: np.ndarray  # (C, d_raw)
    covariances: np.ndarray  # (C, d_raw, d_raw)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class ScenarioSpec:
    num_classes: int
    modality1: ModalitySpec
    modality2: ModalitySpec
    num_samples: int
    corruption: Corruption = field(default_factory=Corruption)
    class_prior: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def dims(self):
        return self.modality1.dim, self.modality2.dim

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_prior, dtype=np.float64)

    def validate(self):
        C = self.num_classes
        if not isinstance(C, (int, np.integer)) or C < 1:
            raise ConfigError("must be a positive integer", "num_classes")
        if self.num_samples < 0:
            raise ConfigError("must be nonnegative", "num_samples")
        for name in ("modality1", "modality2"):
            mod = getattr(self, name)
            mod.means = np.asarray(mod.means, dtype=np.float64)
            mod.covariances = np.asarray(mod.covariances, dtype=np.float64)
            d = mod.means.shape[-1] if mod.means.ndim == 2 else -1
            if mod.means.shape != (C, d) or d < 1:
                raise ConfigError(f"expected shape ({C}, d_raw)", f"{name}.means")
            if mod.covariances.shape != (C, d, d):
                raise ConfigError(f"expected shape ({C}, {d}, {d})", f"{name}.covariances")
            for c in range(C):
                cov = mod.covariances[c]
                if not np.allclose(cov, cov.T):
                    raise ConfigError("not symmetric", f"{name}.covariances[{c}]")
                try:
                    np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    raise ConfigError("not positive definite", f"{name}.covariances[{c}]") from None
        prior = self.prior
        if prior.shape != (C,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
            raise ConfigError("must be a probability vector of length num_classes", "class_prior")
        self.corruption.validate()
        if self.corruption.direction is not None:
            dims = [self.modality1.dim, self.modality2.dim]
            targets = {"M1": [0], "M2": [1], "BOTH": [0, 1], "NONE": []}[self.corruption.target]
            for m in targets:
                if len(self.corruption.direction) != dims[m]:
                    raise ConfigError("length must match the target's raw dim", "corruption.direction")

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_classes": int(self.num_classes),
            "num_samples": int(self.num_samples),
            "seed": int(self.seed),
            "class_prior": None if self.class_prior is None else self.prior.tolist(),
            "modality1": {
                "means": self.modality1.means.tolist(),
                "covariances": self.modality1.covariances.tolist(),
            },
            "modality2": {
                "means": self.modality2.means.tolist(),
                "covariances": self.modality2.covariances.tolist(),
            },
            "corruption": asdict(self.corruption),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        allowed = {"num_classes", "num_samples", "seed", "class_prior", "modality1", "modality2", "corruption"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError("unknown key", sorted(unknown)[0])
        for key in ("num_classes", "num_samples", "modality1", "modality2"):
            if key not in data:
                raise ConfigError("missing", key)
        mods = []
        for name in ("modality1", "modality2"):
            m = data[name]
            if not isinstance(m, dict) or set(m) != {"means", "covariances"}:
                raise ConfigError("must have exactly 'means' and 'covariances'", name)
            mods.append(ModalitySpec(np.asarray(m["means"], float), np.asarray(m["covariances"], float)))
        corr = data.get("corruption") or {}
        bad = set(corr) - {"target", "kind", "severity", "direction"}
        if bad:
            raise ConfigError("unknown key", f"corruption.{sorted(bad)[0]}")
        return cls(
            num_classes=int(data["num_classes"]),
            modality1=mods[0],
            modality2=mods[1],
            num_samples=int(data["num_samples"]),
            corruption=Corruption(**corr),
            class_prior=None if data.get("class_prior") is None else np.asarray(data["class_prior"], float),
            seed=int(data.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        return cls.from_dict(json.loads(text))

    def with_corruption(self, **changes) -> "ScenarioSpec":
        corr = asdict(self.corruption)
        corr.update(changes)
        data = self.to_dict()
        data["corruption"] = corr
        return ScenarioSpec.from_dict(data)

    def replace(self, **changes) -> "ScenarioSpec":
        data = self.to_dict()
        data.update(changes)
        return ScenarioSpec.from_dict(data)


@dataclass
class Stream:
    """Materialized stream: ``x_m1 (n, d1)``, ``x_m2 (n, d2)``, ``labels (n,)``."""

    x_m1: np.ndarray
    x_m2: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return self.labels.shape[0]

    def batches(self, batch_size):
        for start in range(0, len(self), batch_size):
            stop = start + batch_size
            yield self.x_m1[start:stop], self.x_m2[start:stop], self.labels[start:stop]


def _unit_direction(direction, dim):
    v = np.ones(dim) if direction is None else np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ConfigError("must be nonzero", "corruption.direction")
    return v / n


def _corrupt(x, corruption: Corruption, noise):
    s = corruption.severity
    if s == 0:
        return x
    if corruption.kind == "additive-gaussian":
        return x + s * noise
    if corruption.kind == "mean-shift":
        return x + s * _unit_direction(corruption.direction, x.shape[-1])
    return x * (1.0 + s)


def generate(spec: ScenarioSpec, start: int = 0, stop: Optional[int] = None) -> Stream:
    """Draw samples ``start..stop`` of the scenario's stream."""
    stop = spec.num_samples if stop is None else min(stop, spec.num_samples)
    n = max(stop - start, 0)
    d1, d2 = spec.dims
    cdf = np.cumsum(spec.prior)
    cdf[-1] = 1.0
    chol1 = np.linalg.cholesky(spec.modality1.covariances)
    chol2 = np.linalg.cholesky(spec.modality2.covariances)

    labels = np.empty(n, dtype=np.int64)
    e1 = np.empty((n, d1))
    e2 = np.empty((n, d2))
    noise1 = np.empty((n, d1))
    noise2 = np.empty((n, d2))
    for row, i in enumerate(range(start, stop)):
        rng = np.random.default_rng([spec.seed, i])
        labels[row] = min(int(np.searchsorted(cdf, rng.random(), side="right")), spec.num_classes - 1)
        e1[row] = rng.standard_normal(d1)
        e2[row] = rng.standard_normal(d2)
        noise1[row] = rng.standard_normal(d1)
        noise2[row] = rng.standard_normal(d2)

    x1 = spec.modality1.means[labels] + np.einsum("nij,nj->ni", chol1[labels], e1)
    x2 = spec.modality2.means[labels] + np.einsum("nij,nj->ni", chol2[labels], e2)
    target = spec.corruption.target
    if target in ("M1", "BOTH"):
        x1 = _corrupt(x1, spec.corruption, noise1)
    if target in ("M2", "BOTH"):
        x2 = _corrupt(x2, spec.corruption, noise2)
    return Stream(x1, x2, labels, spec.num_classes)


def _random_spd(rng, dim, scale, spread):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = scale * np.exp(spread * rng.uniform(-1.0, 1.0, dim))
    return (q * eig) @ q.T


def make_scenario(
    num_classes=3,
    raw_dim=12,
    num_samples=1000,
    separation=3.0,
    noise_scale=1.0,
    corruption: Optional[Corruption] = None,
    seed=0,
) -> ScenarioSpec:
    """Random scenario with distinct per-class covariances in both modalities.

    Class means sit on a randomly rotated regular simplex with pairwise
    distance ``separation``; covariances are random rotations of log-uniform
    spectra around ``noise_scale``.
    """
    if raw_dim < num_classes:
        raise ConfigError("raw_dim must be >= num_classes for simplex means", "raw_dim")
    rng = np.random.default_rng([seed, 0x5CE])
    simplex = np.eye(num_classes) - 1.0 / num_classes
    simplex *= separation / np.sqrt(2.0)
    mods = []
    for _ in range(2):
        basis, _ = np.linalg.qr(rng.standard_normal((raw_dim, num_classes)))
        means = simplex @ basis.T
        covs = np.stack([_random_spd(rng, raw_dim, noise_scale, 0.5) for _ in range(num_classes)])
        covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
        mods.append(ModalitySpec(means, covs))
    return ScenarioSpec(
        num_classes=num_classes,
        modality1=mods[0],
        modality2=mods[1],
        num_samples=num_samples,
        corruption=corruption or Corruption(),
        seed=seed,
    )
