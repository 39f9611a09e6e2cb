"""Codebook construction and k-means initialization.

A codebook carries two K x D anchor sets: residual anchors (what residuals
are measured against) and assignment anchors (what the soft-assignment
softmax compares descriptors to). They start out identical and may diverge
during joint training.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteInputError

DEFAULT_ALPHA = 1000.0
KMEANS_MAX_ITERS = 100


@dataclass
class Codebook:
    residual_anchors: np.ndarray  # (K, D)
    assign_anchors: np.ndarray  # (K, D)
    alpha: float

    @property
    def num_words(self) -> int:
        return self.residual_anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.residual_anchors.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(
            self.residual_anchors.copy(), self.assign_anchors.copy(), self.alpha
        )


def build_codebook(anchors, alpha=DEFAULT_ALPHA) -> Codebook:
    """Wrap a K x D anchor matrix into a codebook with both anchor sets equal."""
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[0] < 1 or anchors.shape[1] < 1:
        raise ConfigError(f"anchors must be a nonempty K x D matrix, got {anchors.shape}")
    if not np.all(np.isfinite(anchors)):
        raise NonFiniteInputError("anchors contain NaN or Inf values")
    if not alpha > 0:
        raise ConfigError(f"assignment sharpness must be positive, got {alpha}")
    return Codebook(anchors.copy(), anchors.copy(), float(alpha))


def _plusplus_seed(samples, k, rng):
    """k-means++ seeding: spread initial centers proportionally to squared distance."""
    n = samples.shape[0]
    centers = np.empty((k, samples.shape[1]), dtype=np.float64)
    centers[0] = samples[rng.integers(n)]
    closest = np.sum((samples - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass is on existing centers; reuse any sample
            centers[i] = samples[rng.integers(n)]
            continue
        idx = rng.choice(n, p=closest / total)
        centers[i] = samples[idx]
        closest = np.minimum(closest, np.sum((samples - centers[i]) ** 2, axis=1))
    return centers


def lloyd_kmeans(samples, k, max_iters=KMEANS_MAX_ITERS, seed=0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centers, labels, costs) where costs[i] is the within-cluster sum
    of squares measured at the assignment step of iteration i. Deterministic
    for fixed (samples, k, seed). Empty clusters are repaired by reseeding to
    the sample currently farthest from its own center.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ConfigError(f"samples must be an n x D matrix, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteInputError("samples contain NaN or Inf values")
    if k < 1:
        raise ConfigError("cluster count must be at least 1")
    if samples.shape[0] < k:
        raise ConfigError(
            f"need at least {k} samples to build {k} clusters, got {samples.shape[0]}"
        )

    rng = np.random.default_rng(seed)
    centers = _plusplus_seed(samples, k, rng)
    labels = None
    costs = []
    for _ in range(max_iters):
        d2 = pairwise_sq_dists(samples, centers)
        new_labels = np.argmin(d2, axis=1)
        costs.append(float(d2[np.arange(samples.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        dists_own = d2[np.arange(samples.shape[0]), labels]
        taken = np.zeros(samples.shape[0], dtype=bool)
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = samples[members].mean(axis=0)
            else:
                masked = np.where(taken, -np.inf, dists_own)
                far = int(np.argmax(masked))
                centers[j] = samples[far]
                taken[far] = True
    return centers, labels, costs


def kmeans_init(samples, k, alpha=DEFAULT_ALPHA, max_iters=KMEANS_MAX_ITERS, seed=0) -> Codebook:
    """Cluster descriptor samples and wrap the centers into a fresh codebook."""
    centers, _, _ = lloyd_kmeans(samples, k, max_iters=max_iters, seed=seed)
    return build_codebook(centers, alpha=alpha)


def pairwise_sq_dists(points, anchors):
    """Exact squared distances, chunked so memory stays bounded.

    Computed from explicit differences rather than the expanded dot-product
    identity: the expansion loses ~1e-15 absolute accuracy to cancellation,
    which matters downstream when sharpness scales the exponents.
    """
    points = np.asarray(points, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    m = points.shape[0]
    k, d = anchors.shape
    out = np.empty((m, k), dtype=np.float64)
    chunk = max(1, 4_000_000 // max(1, k * d))
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        diff = points[start:stop, None, :] - anchors[None, :, :]
        out[start:stop] = np.einsum("mkd,mkd->mk", diff, diff)
    return out
