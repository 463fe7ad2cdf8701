"""Streaming Gaussian discriminant analysis for multi-modal test-time adaptation.

The package keeps three banks of class-conditional Gaussians (modality 1,
modality 2, fused) updated from unlabeled batches, fuses their scores with
a source classifier, detects which modality has drifted, and adapts a small
differentiable stand-in encoder toward the reliable modality.
"""

__version__ = "0.1.0"

from .engine import (
    AdamState,
    AdaptationConfig,
    Adapter,
    RunReport,
    ToyEncoderParams,
    build_source_model,
    forward,
    losses_and_grads,
    run_stream,
)
from .errors import (
    AdaPGCError,
    ConfigError,
    ContractViolation,
    EmptyClass,
    NonFiniteLoss,
    NumericalDegeneracy,
    RejectedBatch,
    RejectedInput,
    RejectedSample,
    StreamFormatError,
)
from .fusion import BatchView, alignment_loss, balance_reg, confidence_reg, fused_logits, predict
from .gaussian import (
    ClassGaussian,
    Perspective,
    PerspectiveBank,
    SufficientStats,
    cov_deviations,
    mle_from_stats,
    posterior,
    quad_score,
    quad_scores,
    shrink_covariance,
)
from .rectification import (
    ReliabilityPartition,
    one_sided_infonce,
    partition_from_posteriors,
    reliability_partition,
    symmetric_kl,
)
from .streaming import HeadParams, init_from_head, update_bank
from .synth import Corruption, ScenarioSpec, Stream, generate, make_scenario
