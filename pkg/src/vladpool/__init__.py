"""Learnable soft-assignment VLAD pooling over video feature maps."""

from .aggregation import (
    EPS_NORM,
    VladGradients,
    average_pool,
    average_pool_backward,
    flatten_l2_normalize,
    intra_normalize,
    l2_normalize,
    max_pool,
    max_pool_backward,
    pool_descriptor,
    soft_assign,
    vlad_backward,
    vlad_descriptor,
    vlad_forward,
)
from .codebook import Codebook, build_codebook, kmeans_init, lloyd_kmeans
from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    ChecksumError,
    ConfigError,
    DimensionMismatchError,
    FeatureFileError,
    FileAccessError,
    ManifestError,
    NonFiniteInputError,
    SizeMismatchError,
    VladError,
)
from .features import FeatureMap
from .fusion import (
    ScoreVector,
    concat_fuse,
    early_fuse,
    late_fuse,
    multicrop_pool,
    score_fuse_external,
)
from .synthetic import SynthConfig, SynthDataset, synth_generate
from .training import (
    AdamState,
    ClassifierModel,
    TrainConfig,
    accumulate_gradients,
    adam_step,
    apply_dropout,
    classifier_forward,
    clip_gradients,
    softmax_cross_entropy,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
