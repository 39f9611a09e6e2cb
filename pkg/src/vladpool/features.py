"""Video feature-map container.

A feature map holds one descriptor per spatial location per frame: shape
(T, N, D) with T frames, N locations per frame and D channels. All pipeline
math runs in float64; file storage downcasts to float32 (see data_io).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteInputError


@dataclass(frozen=True)
class FeatureMap:
    """Dense (T, N, D) descriptor tensor for a single video.

    Zero-sized extents are permitted so that fusion identities (empty second
    stream, zero-channel stream) stay expressible; aggregation of an empty
    map yields the degenerate all-zero descriptor.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionMismatchError(
                f"feature map must be (T, N, D), got shape {np.shape(self.data)}"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError("feature map contains NaN or Inf values")
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def locations(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def descriptors(self) -> np.ndarray:
        """All T*N descriptors as an (M, D) matrix, frame-major order."""
        return self.data.reshape(-1, self.data.shape[2])

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(
            self.data, other.data
        )
