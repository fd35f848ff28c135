"""Pyramid time-series transformer classification with a generative extension.

Library layout:

- `data`: dataset types, preprocessing, synthetic generation, label masking
- `sits_io`: the `.sits` binary dataset format
- `distributions`: reparameterized samplers and closed-form divergences
- `model`: encoder pyramid, decoder, heads, class centers
- `objective`: loss terms, schedules, ablation presets
- `training`: train loop, checkpoints, evaluation, semi-supervised sweep
- `analysis`: metrics, PCA diagnostics, latent export, parameter counts
- `estimators`: scikit-learn style classifier wrappers
- `cli`: the `tvptst` command-line experiment runner
"""

from .data import (
    Dataset,
    PhenologyParams,
    PixelParcel,
    StatSeries,
    SyntheticConfig,
    generate_synthetic,
    mask_labels,
    parcel_statistics,
    temporal_median_downsample,
)
from .distributions import (
    GaussianParams,
    gumbel_max,
    kl_categorical,
    kl_gaussian_gaussian,
    sample_concrete,
    sample_gaussian,
)
from .estimators import PTSTClassifier, TVPTSTClassifier
from .model import (
    DecoderConfig,
    ModelConfig,
    StageConfig,
    TVPTSTNetwork,
    build_network,
)
from .objective import (
    Batch,
    LossBreakdown,
    ObjectiveConfig,
    baseline_objective,
    compute_objective,
    cosine_loss,
    gamma2_schedule,
    preset,
    tampered_objective,
)
from .analysis import (
    ConfusionMatrix,
    LatentDump,
    MacroMetrics,
    export_latents,
    macro_metrics,
    param_count,
    pca_variance_ratios,
)
from .sits_io import SitsFormatError, read_sits, write_sits
from .training import (
    Checkpoint,
    EvalReport,
    RunRecord,
    TrainConfig,
    UnsupportedModeError,
    evaluate,
    semi_supervised_sweep,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "Checkpoint",
    "ConfusionMatrix",
    "Dataset",
    "DecoderConfig",
    "EvalReport",
    "GaussianParams",
    "LatentDump",
    "LossBreakdown",
    "MacroMetrics",
    "ModelConfig",
    "ObjectiveConfig",
    "PTSTClassifier",
    "PhenologyParams",
    "PixelParcel",
    "RunRecord",
    "SitsFormatError",
    "StageConfig",
    "StatSeries",
    "SyntheticConfig",
    "TVPTSTClassifier",
    "TVPTSTNetwork",
    "TrainConfig",
    "UnsupportedModeError",
    "baseline_objective",
    "build_network",
    "compute_objective",
    "cosine_loss",
    "evaluate",
    "export_latents",
    "gamma2_schedule",
    "generate_synthetic",
    "gumbel_max",
    "kl_categorical",
    "kl_gaussian_gaussian",
    "macro_metrics",
    "mask_labels",
    "param_count",
    "parcel_statistics",
    "pca_variance_ratios",
    "preset",
    "read_sits",
    "sample_concrete",
    "sample_gaussian",
    "semi_supervised_sweep",
    "tampered_objective",
    "temporal_median_downsample",
    "train",
    "write_sits",
]
