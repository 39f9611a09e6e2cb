"""Soft-assignment VLAD aggregation: forward, backward, and pooling baselines.

The aggregation maps a (T, N, D) feature map and a K-word codebook to a
D x K residual matrix

    V[j, k] = sum_t sum_i  p_k(x_it) * (x_it[j] - c_k[j])

where p is a softmax over negative alpha-scaled squared distances to the
assignment anchors. The matrix is then column-normalized, flattened and
L2-normalized into a single K*D descriptor. Every step here has an exact
analytic backward so anchors (and, if a caller wants them, input features)
can be trained end to end.
"""

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, pairwise_sq_dists
from .errors import ConfigError, DimensionMismatchError, NonFiniteInputError
from .features import FeatureMap

# Vectors/columns with L2 norm below this are treated as exactly zero by the
# normalization steps, and their normalization gradient is defined as zero.
EPS_NORM = 1e-12

POOLING_MODES = ("vlad", "avg", "max")


def l2_normalize(vec):
    """Scale to unit L2 norm; vectors with norm < EPS_NORM map to exact zeros."""
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm < EPS_NORM:
        return np.zeros_like(vec)
    return vec / norm


def soft_assign(x, codebook: Codebook):
    """Fractional assignment of descriptors to codebook cells.

    Accepts a single D-vector or an (M, D) matrix and returns the matching
    (K,) or (M, K) row-stochastic weights. The softmax subtracts the row
    maximum before exponentiation; with sharpness values around 1e3 the raw
    exponents overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.ndim != 2 or pts.shape[1] != codebook.dim:
        raise DimensionMismatchError(
            f"descriptor dim {x.shape[-1] if x.ndim else 0} does not match "
            f"codebook dim {codebook.dim}"
        )
    if not np.all(np.isfinite(pts)):
        raise NonFiniteInputError("descriptors contain NaN or Inf values")
    logits = -codebook.alpha * pairwise_sq_dists(pts, codebook.assign_anchors)
    if logits.size:
        logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def vlad_forward(features: FeatureMap, codebook: Codebook) -> np.ndarray:
    """Aggregate a feature map into the raw (un-normalized) D x K residual matrix."""
    if features.dim != codebook.dim:
        raise DimensionMismatchError(
            f"feature dim {features.dim} does not match codebook dim {codebook.dim}"
        )
    X = features.descriptors
    if X.shape[0] == 0:
        return np.zeros((codebook.dim, codebook.num_words), dtype=np.float64)
    P = soft_assign(X, codebook)
    return X.T @ P - codebook.residual_anchors.T * P.sum(axis=0)


def intra_normalize(vlad: np.ndarray) -> np.ndarray:
    """L2-normalize each column; near-zero columns become exact zeros."""
    vlad = np.asarray(vlad, dtype=np.float64)
    norms = np.linalg.norm(vlad, axis=0)
    out = np.zeros_like(vlad)
    alive = norms >= EPS_NORM
    out[:, alive] = vlad[:, alive] / norms[alive]
    return out


def flatten_l2_normalize(vlad: np.ndarray) -> np.ndarray:
    """Stack columns (cell k occupies [k*D, (k+1)*D)) and L2-normalize the result."""
    vlad = np.asarray(vlad, dtype=np.float64)
    return l2_normalize(vlad.T.reshape(-1))


def vlad_descriptor(features: FeatureMap, codebook: Codebook) -> np.ndarray:
    """Full pipeline: aggregate, intra-normalize, flatten, L2-normalize."""
    return flatten_l2_normalize(intra_normalize(vlad_forward(features, codebook)))


@dataclass
class VladGradients:
    features: np.ndarray  # (T, N, D)
    residual_anchors: np.ndarray  # (K, D)
    assign_anchors: np.ndarray  # (K, D)


def vlad_backward(features: FeatureMap, codebook: Codebook, upstream) -> VladGradients:
    """Analytic gradients of the full descriptor pipeline.

    ``upstream`` is the loss gradient w.r.t. the final K*D descriptor; the
    return value holds the loss gradients w.r.t. every input descriptor,
    the residual anchors and the assignment anchors. Columns whose raw norm
    fell below EPS_NORM propagate zero gradient through their normalization.
    """
    if features.dim != codebook.dim:
        raise DimensionMismatchError(
            f"feature dim {features.dim} does not match codebook dim {codebook.dim}"
        )
    k, d = codebook.num_words, codebook.dim
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (k * d,):
        raise DimensionMismatchError(
            f"upstream gradient must have length {k * d}, got shape {upstream.shape}"
        )

    X = features.descriptors
    m = X.shape[0]
    if m == 0:
        return VladGradients(
            np.zeros_like(features.data), np.zeros((k, d)), np.zeros((k, d))
        )
    A = codebook.assign_anchors
    C = codebook.residual_anchors
    alpha = codebook.alpha

    # recompute forward intermediates
    P = soft_assign(X, codebook)  # (M, K)
    mass = P.sum(axis=0)  # (K,)
    V = X.T @ P - C.T * mass  # (D, K)
    col_norms = np.linalg.norm(V, axis=0)
    alive = col_norms >= EPS_NORM
    U = np.zeros_like(V)
    U[:, alive] = V[:, alive] / col_norms[alive]
    flat = U.T.reshape(-1)
    total_norm = float(np.linalg.norm(flat))

    # back through the final L2 normalization
    if total_norm < EPS_NORM:
        g_flat = np.zeros_like(flat)
    else:
        unit = flat / total_norm
        g_flat = (upstream - unit * (unit @ upstream)) / total_norm

    # back through per-column normalization
    g_unit = g_flat.reshape(k, d).T  # (D, K)
    g_v = np.zeros_like(g_unit)
    dots = np.einsum("jk,jk->k", U, g_unit)
    g_v[:, alive] = (g_unit[:, alive] - U[:, alive] * dots[alive]) / col_norms[alive]

    # back through the aggregation itself
    grad_residual = -(mass[:, None] * g_v.T)  # (K, D)
    g_x = P @ g_v.T  # residual path, (M, D)

    # assignment path: gradient flows through the softmax weights
    g_p = X @ g_v - np.einsum("kj,jk->k", C, g_v)[None, :]  # (M, K)
    row_mix = np.sum(P * g_p, axis=1, keepdims=True)
    g_logits = P * (g_p - row_mix)  # (M, K)
    row_sums = g_logits.sum(axis=1, keepdims=True)
    g_x += -2.0 * alpha * (X * row_sums - g_logits @ A)
    grad_assign = 2.0 * alpha * (g_logits.T @ X - A * g_logits.sum(axis=0)[:, None])

    return VladGradients(g_x.reshape(features.data.shape), grad_residual, grad_assign)


def average_pool(features: FeatureMap) -> np.ndarray:
    """Mean descriptor over all frames and locations, L2-normalized."""
    X = features.descriptors
    if X.shape[0] == 0:
        return np.zeros(features.dim, dtype=np.float64)
    return l2_normalize(X.mean(axis=0))


def average_pool_backward(features: FeatureMap, upstream) -> np.ndarray:
    """Gradient of the normalized mean descriptor w.r.t. every input descriptor."""
    X = features.descriptors
    m = X.shape[0]
    if m == 0:
        return np.zeros_like(features.data)
    g = _normalize_backward(X.mean(axis=0), np.asarray(upstream, dtype=np.float64))
    return np.broadcast_to(g / m, X.shape).reshape(features.data.shape).copy()


def max_pool(features: FeatureMap) -> np.ndarray:
    """Elementwise max over all frames and locations, L2-normalized."""
    X = features.descriptors
    if X.shape[0] == 0:
        return np.zeros(features.dim, dtype=np.float64)
    return l2_normalize(X.max(axis=0))


def max_pool_backward(features: FeatureMap, upstream) -> np.ndarray:
    """Route the upstream gradient to each dimension's argmax descriptor.

    Ties go to the first occurrence in frame-major order.
    """
    X = features.descriptors
    m = X.shape[0]
    if m == 0:
        return np.zeros_like(features.data)
    g = _normalize_backward(X.max(axis=0), np.asarray(upstream, dtype=np.float64))
    winners = np.argmax(X, axis=0)
    g_x = np.zeros_like(X)
    g_x[winners, np.arange(X.shape[1])] = g
    return g_x.reshape(features.data.shape)


def pool_descriptor(features: FeatureMap, codebook: Codebook, mode: str) -> np.ndarray:
    """Dispatch to one of the pooling strategies ("vlad", "avg", "max")."""
    if mode == "vlad":
        return vlad_descriptor(features, codebook)
    if mode == "avg":
        return average_pool(features)
    if mode == "max":
        return max_pool(features)
    raise ConfigError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def _normalize_backward(raw, upstream):
    """Gradient of v -> v/||v|| at ``raw``, applied to ``upstream``."""
    norm = float(np.linalg.norm(raw))
    if norm < EPS_NORM:
        return np.zeros_like(raw)
    unit = raw / norm
    return (upstream - unit * (unit @ upstream)) / norm
