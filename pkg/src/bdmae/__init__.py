"""Blind test-time backdoor defense for black-box hard-label classifiers.

Pipeline per test image: generate image- and label-based trigger-region
scores from repeated random masking and restoration, sharpen them with
topology-aware refinement, then fuse restorations from an adaptive ladder
of score thresholds into a purified image whose prediction is returned.
"""

from .attacksim import Dataset, Metrics, TriggerSpec, apply_trigger, evaluate, generate_corpus
from .core import (
    child_rng,
    interpolate_image,
    make_rng,
    sample_uniform_token_mask,
    token_mask_to_pixel_mask,
)
from .oracles import (
    Classifier,
    EchoRestorer,
    ExternalOracle,
    LaplaceRestorer,
    OracleEndpoint,
    OracleError,
    OracleTimeout,
    ProtocolError,
    Restorer,
    SyntheticWorld,
    laplace_inpaint_restorer,
    synthetic_backdoored_classifier,
    synthetic_clean_classifier,
)
from .refine import RefineConfig, compute_refine_set, refine_scores, sample_topology_mask
from .restore import (
    DefenseConfig,
    DefenseReport,
    RestoreConfig,
    adjust_thresholds,
    combine_scores,
    defend,
    purify,
)
from .scoregen import (
    CoverageError,
    ScoreGenConfig,
    fuse_restorations,
    generate_scores,
    restore_composite,
)
from .ssim import SsimConfig, image_score, ssim_map

__version__ = "0.1.0"

__all__ = [
    "Classifier",
    "CoverageError",
    "Dataset",
    "DefenseConfig",
    "DefenseReport",
    "EchoRestorer",
    "ExternalOracle",
    "LaplaceRestorer",
    "Metrics",
    "OracleEndpoint",
    "OracleError",
    "OracleTimeout",
    "ProtocolError",
    "RefineConfig",
    "RestoreConfig",
    "Restorer",
    "ScoreGenConfig",
    "SsimConfig",
    "SyntheticWorld",
    "TriggerSpec",
    "adjust_thresholds",
    "apply_trigger",
    "child_rng",
    "combine_scores",
    "compute_refine_set",
    "defend",
    "evaluate",
    "fuse_restorations",
    "generate_corpus",
    "generate_scores",
    "image_score",
    "interpolate_image",
    "laplace_inpaint_restorer",
    "make_rng",
    "purify",
    "refine_scores",
    "restore_composite",
    "sample_topology_mask",
    "sample_uniform_token_mask",
    "ssim_map",
    "synthetic_backdoored_classifier",
    "synthetic_clean_classifier",
    "token_mask_to_pixel_mask",
]
