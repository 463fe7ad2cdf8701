"""Differentiable stand-in pipeline and the per-batch adaptation loop.

The toy encoder maps raw modality vectors to three features of equal size::

    z_m = ln_scale_m * standardize(A_m x_m) + ln_shift_m      (m = 1, 2)
    z_F = W_F [z_1; z_2]
    s   = head(z_F)

``A_m`` and the head are frozen. Losses are routed to parameter groups:
the source-branch losses (confidence, balance, alignment) reach only
``W_F``; the contrastive loss reaches only the normalization affine of each
anchor's own modality.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List

import numpy as np

from .errors import ConfigError, ContractViolation, NonFiniteLoss
from .fusion import alignment_loss, balance_reg, confidence_reg, fused_logits, predict
from .gaussian import Perspective, PerspectiveBank, quad_scores, softmax
from .rectification import ReliabilityPartition, one_sided_infonce, partition_from_posteriors
from .streaming import HeadParams, init_from_head, update_bank

STD_FLOOR = 1e-6

GROUPS = {
    "fusion": ("fusion",),
    "ln_m1": ("ln_scale_m1", "ln_shift_m1"),
    "ln_m2": ("ln_scale_m2", "ln_shift_m2"),
}
# which parameter groups each loss may touch
ROUTES = {
    "ra": ("fusion",),
    "bal": ("fusion",),
    "g": ("fusion",),
    "c": ("ln_m1", "ln_m2"),
}
LOSS_NAMES = {"ra": "L_ra", "bal": "L_bal", "g": "L_g", "c": "L_c"}


@dataclass
class AdaptationConfig:
    batch_size: int = 16
    lam: float = 1.0
    w_c: float = 0.01
    w_g: float = 1.0
    w_ra: float = 1.0
    w_bal: float = 1.0
    balance_sign: float = 1.0
    alpha: float = 0.9
    tau: float = 0.05
    shrinkage: float = 1e-4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    responsibilities: str = "source"
    unimodal_posteriors: str = "gda"
    partition_trace: bool = False
    feature_dim: int = 8
    prefit_l2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.batch_size, (int, np.integer)) or self.batch_size < 1:
            raise ConfigError("must be a positive integer", "batch_size")
        if not isinstance(self.feature_dim, (int, np.integer)) or self.feature_dim < 2:
            raise ConfigError("must be an integer >= 2", "feature_dim")
        for name in ("lam", "w_c", "w_g", "w_ra", "w_bal"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError("must be a finite nonnegative number", name)
        for name in ("tau", "shrinkage", "lr", "adam_eps", "prefit_l2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ConfigError("must be positive", name)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("must lie in [0, 1]", "alpha")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must lie in [0, 1)", name)
        if self.balance_sign not in (1.0, -1.0):
            raise ConfigError("must be +1 or -1", "balance_sign")
        if self.responsibilities not in ("source", "fused"):
            raise ConfigError("must be 'source' or 'fused'", "responsibilities")
        if self.unimodal_posteriors not in ("gda", "head"):
            raise ConfigError("must be 'gda' or 'head'", "unimodal_posteriors")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(names)
        if unknown:
            raise ConfigError("unknown key", sorted(unknown)[0])
        kwargs = {}
        for key, value in data.items():
            default = names[key].default
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                elif isinstance(default, int):
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    value = int(value)
                elif isinstance(default, float):
                    if isinstance(value, bool):
                        raise TypeError
                    value = float(value)
                elif isinstance(default, str) and not isinstance(value, str):
                    raise TypeError
            except (TypeError, ValueError):
                raise ConfigError(f"wrong type {type(value).__name__}", key) from None
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class ToyEncoderParams:
    proj_m1: np.ndarray
    proj_m2: np.ndarray
    head: HeadParams
    ln_scale_m1: np.ndarray
    ln_shift_m1: np.ndarray
    ln_scale_m2: np.ndarray
    ln_shift_m2: np.ndarray
    fusion: np.ndarray

    @classmethod
    def initial(cls, raw_dims, feature_dim, num_classes, rng) -> "ToyEncoderParams":
        """Seeded frozen projections, identity affines and an averaging fusion map."""
        d1, d2 = raw_dims
        k = feature_dim
        eye = np.eye(k)
        return cls(
            proj_m1=rng.standard_normal((k, d1)) / np.sqrt(d1),
            proj_m2=rng.standard_normal((k, d2)) / np.sqrt(d2),
            head=HeadParams(np.zeros((num_classes, k)), np.zeros(num_classes)),
            ln_scale_m1=np.ones(k),
            ln_shift_m1=np.zeros(k),
            ln_scale_m2=np.ones(k),
            ln_shift_m2=np.zeros(k),
            fusion=np.hstack([0.5 * eye, 0.5 * eye]),
        )

    @property
    def feature_dim(self) -> int:
        return self.fusion.shape[0]

    def adaptable(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for group in GROUPS.values() for name in group}

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.proj_m1, self.proj_m2, self.head.weights, self.head.biases):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(
            proj_m1=self.proj_m1.copy(),
            proj_m2=self.proj_m2.copy(),
            head=HeadParams(self.head.weights.copy(), self.head.biases.copy()),
            **{name: arr.copy() for name, arr in self.adaptable().items()},
        )


def standardize(y):
    """Per-vector zero mean / unit std, with a floor on the std."""
    mu = y.mean(axis=1, keepdims=True)
    sd = y.std(axis=1, keepdims=True)
    return (y - mu) / (sd + STD_FLOOR)


@dataclass
class EncoderOutput:
    h_m1: np.ndarray
    h_m2: np.ndarray
    z_m1: np.ndarray
    z_m2: np.ndarray
    z_fused: np.ndarray
    source_logits: np.ndarray

    @property
    def concat(self) -> np.ndarray:
        return np.hstack([self.z_m1, self.z_m2])

    def features(self) -> Dict[Perspective, np.ndarray]:
        return {Perspective.M1: self.z_m1, Perspective.M2: self.z_m2, Perspective.FUSED: self.z_fused}


def forward(x_m1, x_m2, params: ToyEncoderParams) -> EncoderOutput:
    x_m1 = np.atleast_2d(np.asarray(x_m1, dtype=np.float64))
    x_m2 = np.atleast_2d(np.asarray(x_m2, dtype=np.float64))
    if not (np.all(np.isfinite(x_m1)) and np.all(np.isfinite(x_m2))):
        raise ContractViolation("raw inputs must be finite")
    h1 = standardize(x_m1 @ params.proj_m1.T)
    h2 = standardize(x_m2 @ params.proj_m2.T)
    z1 = params.ln_scale_m1 * h1 + params.ln_shift_m1
    z2 = params.ln_scale_m2 * h2 + params.ln_shift_m2
    zf = np.hstack([z1, z2]) @ params.fusion.T
    return EncoderOutput(h1, h2, z1, z2, zf, params.head.logits(zf))


@dataclass
class LossReport:
    values: Dict[str, float]
    total: float
    grads: Dict[str, np.ndarray]
    # per-loss gradient on every adaptable parameter, for routing audits
    contributions: Dict[str, Dict[str, np.ndarray]]


def losses_and_grads(
    enc: EncoderOutput,
    p_lp,
    partition: ReliabilityPartition,
    params: ToyEncoderParams,
    cfg: AdaptationConfig,
    targets=None,
) -> LossReport:
    """Evaluate the four losses and their routed parameter gradients.

    ``p_lp`` (fused GDA posterior) and ``partition`` are treated as constants;
    ``targets`` optionally overrides the stop-gradient features of the
    contrastive loss.
    """
    p_src = softmax(enc.source_logits, axis=1)
    l_ra, g_ra = confidence_reg(p_src)
    l_bal, g_bal = balance_reg(p_src, cfg.balance_sign)
    l_g, g_g = alignment_loss(p_lp, enc.source_logits)
    l_c, gz1, gz2 = one_sided_infonce(enc.z_m1, enc.z_m2, partition, cfg.tau, targets)

    values = {"ra": l_ra, "bal": l_bal, "g": l_g, "c": l_c}
    weights = {"ra": cfg.w_ra, "bal": cfg.w_bal, "g": cfg.w_g, "c": cfg.w_c}
    for key, value in values.items():
        if not np.isfinite(value):
            raise NonFiniteLoss(f"{LOSS_NAMES[key]} is not finite ({value})", LOSS_NAMES[key])

    adaptable = params.adaptable()
    concat = enc.concat
    contributions = {}
    for key, g_logits in (("ra", g_ra), ("bal", g_bal), ("g", g_g)):
        g_zf = (weights[key] * g_logits) @ params.head.weights
        contributions[key] = {"fusion": g_zf.T @ concat}
    g1 = cfg.w_c * gz1
    g2 = cfg.w_c * gz2
    contributions["c"] = {
        "ln_scale_m1": np.sum(g1 * enc.h_m1, axis=0),
        "ln_shift_m1": np.sum(g1, axis=0),
        "ln_scale_m2": np.sum(g2 * enc.h_m2, axis=0),
        "ln_shift_m2": np.sum(g2, axis=0),
    }

    grads = {name: np.zeros_like(arr) for name, arr in adaptable.items()}
    for key, per_param in contributions.items():
        allowed = {name for group in ROUTES[key] for name in GROUPS[group]}
        for name, g in per_param.items():
            if name not in allowed:
                raise ContractViolation(f"{LOSS_NAMES[key]} attempted to update {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"gradient of {LOSS_NAMES[key]} wrt {name} is not finite", LOSS_NAMES[key])
            grads[name] += g

    total = sum(weights[k] * values[k] for k in values)
    return LossReport(values=values, total=float(total), grads=grads, contributions=contributions)


def group_objective(params, x_m1, x_m2, p_lp, partition, targets, cfg, group) -> float:
    """Scalar sum of the losses routed to ``group``, with detached inputs held fixed.

    This is the quantity whose gradient wrt ``group`` the engine applies;
    used for finite-difference certification.
    """
    enc = forward(x_m1, x_m2, params)
    report = losses_and_grads(enc, p_lp, partition, params, cfg, targets)
    weights = {"ra": cfg.w_ra, "bal": cfg.w_bal, "g": cfg.w_g, "c": cfg.w_c}
    return float(sum(weights[k] * report.values[k] for k, groups in ROUTES.items() if group in groups))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """One bias-corrected Adam step, applied in place to ``params``."""
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def init_banks(head: HeadParams, cfg: AdaptationConfig) -> Dict[Perspective, PerspectiveBank]:
    return {p: init_from_head(head, p, cfg.alpha, cfg.shrinkage) for p in Perspective}


def _accuracy(pred, labels):
    return None if labels is None else float(np.mean(pred == labels))


class Adapter:
    """Mutable adaptation state for one stream: banks, encoder, optimizer."""

    def __init__(self, params: ToyEncoderParams, cfg: AdaptationConfig):
        self.cfg = cfg
        self.params = params
        self.banks = init_banks(params.head, cfg)
        self.adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.batches = 0
        self.samples_seen = 0

    def score(self, enc: EncoderOutput) -> Dict[Perspective, np.ndarray]:
        feats = enc.features()
        return {p: quad_scores(feats[p], self.banks[p]) for p in Perspective}

    def step(self, x_m1, x_m2, labels=None) -> dict:
        """Process one batch; returns its metrics record.

        Predictions and metrics come from the forward pass and bank state
        before this batch's own updates.
        """
        cfg = self.cfg
        enc = forward(x_m1, x_m2, self.params)
        B = enc.source_logits.shape[0]
        scores = self.score(enc)
        fused = fused_logits(enc.source_logits, scores[Perspective.FUSED], cfg.lam)

        if cfg.responsibilities == "source":
            resp = softmax(enc.source_logits, axis=1)
        else:
            resp = softmax(fused, axis=1)
        feats = enc.features()
        for p in Perspective:
            update_bank(self.banks[p], feats[p], resp)

        post = {p: softmax(scores[p], axis=1) for p in Perspective}
        if cfg.unimodal_posteriors == "head":
            uni1 = softmax(self.params.head.logits(enc.z_m1), axis=1)
            uni2 = softmax(self.params.head.logits(enc.z_m2), axis=1)
        else:
            uni1, uni2 = post[Perspective.M1], post[Perspective.M2]
        partition = partition_from_posteriors(uni1, uni2, post[Perspective.FUSED])

        report = losses_and_grads(enc, post[Perspective.FUSED], partition, self.params, cfg)
        self.adam.update(self.params.adaptable(), report.grads)

        record = {
            "batch": self.batches,
            "size": int(B),
            "loss_ra": report.values["ra"],
            "loss_bal": report.values["bal"],
            "loss_c": report.values["c"],
            "loss_g": report.values["g"],
            "loss_total": report.total,
            "acc_fused": _accuracy(predict(fused), labels),
            "acc_source": _accuracy(predict(enc.source_logits), labels),
            "acc_gda": _accuracy(predict(scores[Perspective.FUSED]), labels),
        }
        n1, n2 = partition.counts
        if labels is not None:
            record["correct_fused"] = int(np.sum(predict(fused) == labels))
            record["correct_source"] = int(np.sum(predict(enc.source_logits) == labels))
            record["correct_gda"] = int(np.sum(predict(scores[Perspective.FUSED]) == labels))
        record["_partition"] = (n1, n2)
        if cfg.partition_trace:
            record["partition_m1"] = n1
            record["partition_m2"] = n2
        self.batches += 1
        self.samples_seen += B
        return record


@dataclass
class RunReport:
    config: dict
    records: List[dict]
    aggregates: dict
    wall_clock: float
    banks: Dict[Perspective, PerspectiveBank]
    params: ToyEncoderParams
    samples_seen: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "records": self.records,
            "aggregates": self.aggregates,
            "wall_clock_seconds": self.wall_clock,
        }


def _aggregate(records, partition_counts):
    n = sum(r["size"] for r in records)
    agg = {"batches": len(records), "samples": n}
    for key in ("fused", "source", "gda"):
        if records and all(f"correct_{key}" in r for r in records):
            agg[f"acc_{key}"] = sum(r[f"correct_{key}"] for r in records) / n
        else:
            agg[f"acc_{key}"] = None
    for key in ("loss_ra", "loss_bal", "loss_c", "loss_g", "loss_total"):
        # sample-weighted so a ragged last batch counts with its true size
        agg[f"mean_{key}"] = sum(r[key] * r["size"] for r in records) / n if n else None
    n1 = sum(c[0] for c in partition_counts)
    n2 = sum(c[1] for c in partition_counts)
    agg["partition_m1"] = n1
    agg["partition_m2"] = n2
    agg["partition_m1_fraction"] = n1 / n if n else None
    return agg


def run_stream(batches: Iterable, params: ToyEncoderParams, cfg: AdaptationConfig, on_record=None) -> RunReport:
    """Single pass over ``batches`` of ``(x_m1, x_m2, labels_or_None)``.

    ``params`` is adapted in place. ``on_record`` receives each metrics
    record as soon as the batch completes.
    """
    start = time.perf_counter()
    adapter = Adapter(params, cfg)
    records, partitions = [], []
    for x1, x2, labels in batches:
        record = adapter.step(x1, x2, labels)
        partitions.append(record.pop("_partition"))
        records.append(record)
        if on_record is not None:
            on_record(record)
    return RunReport(
        config=cfg.to_dict(),
        records=records,
        aggregates=_aggregate(records, partitions),
        wall_clock=time.perf_counter() - start,
        banks=adapter.banks,
        params=adapter.params,
        samples_seen=adapter.samples_seen,
    )


def prefit_head(params: ToyEncoderParams, x_m1, x_m2, labels, l2=1.0) -> ToyEncoderParams:
    """Fit the frozen head on clean source data, on all three views jointly.

    Training on the uni-modal features as well as the fused one keeps the
    head meaningful for every perspective, which is what lets every bank
    start from the same head.
    """
    from sklearn.linear_model import LogisticRegression

    enc = forward(x_m1, x_m2, params)
    X = np.vstack([enc.z_m1, enc.z_m2, enc.z_fused])
    y = np.concatenate([labels, labels, labels])
    clf = LogisticRegression(C=1.0 / l2, max_iter=2000, tol=1e-8)
    clf.fit(X, y)
    num_classes = int(np.max(labels)) + 1
    W, b = clf.coef_, clf.intercept_
    if num_classes == 2 and W.shape[0] == 1:
        W = np.vstack([-0.5 * W[0], 0.5 * W[0]])
        b = np.array([-0.5 * b[0], 0.5 * b[0]])
    params.head = HeadParams(W.copy(), b.copy())
    return params


def align_projection(params: ToyEncoderParams, x_m1, x_m2, ridge=1e-3) -> ToyEncoderParams:
    """Refit the modality-2 projection so ``A_2 x_2`` regresses onto ``A_1 x_1``.

    Paired ridge regression over clean source pairs puts both modalities in
    one feature space, the role contrastive pre-training plays for a real
    audio-visual backbone.
    """
    target = x_m1 @ params.proj_m1.T
    gram = x_m2.T @ x_m2
    gram += ridge * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    params.proj_m2 = np.linalg.solve(gram, x_m2.T @ target).T
    return params


def build_source_model(source, cfg: AdaptationConfig, num_classes=None) -> ToyEncoderParams:
    """Seeded frozen encoder parts, aligned and topped with a head pre-fit on ``source``."""
    num_classes = num_classes or source.num_classes
    rng = np.random.default_rng([cfg.seed, 0xE7C])
    params = ToyEncoderParams.initial(
        (source.x_m1.shape[1], source.x_m2.shape[1]), cfg.feature_dim, num_classes, rng
    )
    align_projection(params, source.x_m1, source.x_m2)
    return prefit_head(params, source.x_m1, source.x_m2, source.labels, cfg.prefit_l2)
