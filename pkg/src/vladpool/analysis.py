"""Introspection of trained models: assignment maps and per-word score decomposition."""

import numpy as np

from .aggregation import soft_assign, vlad_descriptor
from .codebook import Codebook
from .errors import ConfigError
from .features import FeatureMap
from .training import ClassifierModel


def assignment_map(features: FeatureMap, codebook: Codebook) -> np.ndarray:
    """Argmax cell index of the soft assignment, as a (T, N) integer grid."""
    probs = soft_assign(features.descriptors, codebook)
    return np.argmax(probs, axis=1).reshape(features.frames, features.locations)


def word_contributions(descriptor, model: ClassifierModel, class_index: int, num_words: int):
    """Split a class logit into per-word additive contributions.

    contribution[k] = <W[class, k*D:(k+1)*D], descriptor[k*D:(k+1)*D]>, so the
    contributions plus the class bias reconstruct the logit exactly.
    """
    if not 0 <= class_index < model.num_classes:
        raise ConfigError(
            f"class {class_index} out of range for {model.num_classes} classes"
        )
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.shape != (model.rep_dim,):
        raise ConfigError(
            f"descriptor length {descriptor.shape} does not match classifier dim "
            f"{model.rep_dim}"
        )
    if model.rep_dim % num_words != 0:
        raise ConfigError(
            f"classifier dim {model.rep_dim} is not divisible into {num_words} words"
        )
    dim = model.rep_dim // num_words
    row = model.weights[class_index].reshape(num_words, dim)
    blocks = descriptor.reshape(num_words, dim)
    contributions = np.einsum("kd,kd->k", row, blocks)
    bias = float(model.bias[class_index])
    return contributions, bias


def ranked_word_contributions(features: FeatureMap, codebook: Codebook, model: ClassifierModel, class_index: int):
    """Per-word contributions for one video, sorted by contribution descending.

    Returns (order, contributions, bias, logit) where order[i] is the word
    index with the i-th largest contribution.
    """
    descriptor = vlad_descriptor(features, codebook)
    contributions, bias = word_contributions(
        descriptor, model, class_index, codebook.num_words
    )
    logit = float(contributions.sum() + bias)
    order = np.argsort(-contributions, kind="stable")
    return order, contributions, bias, logit
