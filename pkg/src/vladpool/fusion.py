"""Combining two feature streams, spatial crops, and per-class score vectors."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError, NonFiniteInputError
from .features import FeatureMap


@dataclass
class ScoreVector:
    """Per-class scores, tagged with whether they are softmax probabilities."""

    values: np.ndarray
    is_probability: bool = False

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ConfigError(f"scores must be a 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError("scores contain NaN or Inf values")
        if self.is_probability:
            if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
                raise ConfigError("probability scores must lie in [0, 1]")
            if abs(float(arr.sum()) - 1.0) > 1e-9:
                raise ConfigError("probability scores must sum to 1")
        self.values = arr

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


def concat_fuse(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Channel-wise concatenation of spatially corresponding descriptors."""
    if a.frames != b.frames or a.locations != b.locations:
        raise DimensionMismatchError(
            f"streams must agree on (T, N): {a.data.shape[:2]} vs {b.data.shape[:2]}"
        )
    return FeatureMap(np.concatenate([a.data, b.data], axis=2))


def early_fuse(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Union of both streams' descriptor sets, pooled by a single codebook.

    When the per-frame location counts match, the streams stack as extra
    frames; otherwise everything flattens into one pseudo-frame. Aggregation
    is a sum over an unordered set, so the layout does not affect results.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(
            f"streams must share descriptor dim: {a.dim} vs {b.dim}"
        )
    if a.locations == b.locations:
        return FeatureMap(np.concatenate([a.data, b.data], axis=0))
    merged = np.concatenate([a.descriptors, b.descriptors], axis=0)
    return FeatureMap(merged[None, :, :])


def late_fuse(sa: ScoreVector, sb: ScoreVector, weight: float) -> ScoreVector:
    """weight * sa + (1 - weight) * sb."""
    if sa.num_classes != sb.num_classes:
        raise DimensionMismatchError(
            f"score lengths differ: {sa.num_classes} vs {sb.num_classes}"
        )
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"fusion weight must lie in [0, 1], got {weight}")
    fused = weight * sa.values + (1.0 - weight) * sb.values
    return ScoreVector(fused, is_probability=sa.is_probability and sb.is_probability)


def minmax_normalize(values) -> np.ndarray:
    """Rescale to [0, 1]; an all-equal vector maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-300:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def score_fuse_external(model: ScoreVector, external: ScoreVector, weight: float) -> ScoreVector:
    """Fuse classifier scores with externally computed ones (e.g. from file).

    External scores may be raw margins on an arbitrary scale, so both sides
    are min-max normalized to [0, 1] per video before the weighted average.
    """
    if model.num_classes != external.num_classes:
        raise DimensionMismatchError(
            f"score lengths differ: {model.num_classes} vs {external.num_classes}"
        )
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"fusion weight must lie in [0, 1], got {weight}")
    fused = weight * minmax_normalize(model.values) + (1.0 - weight) * minmax_normalize(
        external.values
    )
    return ScoreVector(fused, is_probability=False)


def multicrop_pool(crops) -> FeatureMap:
    """Merge a list of crops of one video into one descriptor set.

    Same semantics as early fusion generalized to a list: downstream
    aggregation pools over all crops jointly.
    """
    crops = list(crops)
    if not crops:
        raise ConfigError("need at least one crop to pool")
    dim = crops[0].dim
    for crop in crops[1:]:
        if crop.dim != dim:
            raise DimensionMismatchError(
                f"crops must share descriptor dim: {dim} vs {crop.dim}"
            )
    merged = crops[0]
    for crop in crops[1:]:
        merged = early_fuse(merged, crop)
    return merged
