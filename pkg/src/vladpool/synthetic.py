"""Synthetic sub-action dataset generator.

Videos are built from a shared vocabulary of sub-action prototypes: each
frame picks one prototype from its class's multiset and all of the frame's
descriptors are that prototype plus Gaussian noise. The default class layout
is deliberately adversarial to single-point pooling: classes come in pairs
built over prototype quadruples (a, b, max(a,b), min(a,b)) plus a shared
third word, so both classes of a pair have identical descriptor means
(a + b == max(a,b) + min(a,b)) and identical elementwise support envelopes.
Average and max pooling therefore cannot tell the pair apart, while the
per-cell residual distribution still can.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .features import FeatureMap


@dataclass
class SynthConfig:
    num_classes: int = 10
    vocab_size: int = 12
    words_per_class: int = 3
    frames: int = 25
    locations: int = 9
    dim: int = 32
    noise: float = 0.3
    train_per_class: int = 40
    val_per_class: int = 10
    seed: int = 0
    # Prototypes sit close together relative to the descriptor noise so the
    # word clouds overlap like real convolutional feature manifolds do;
    # widely separated atomic clouds would make every fine codebook cell a
    # single isotropic blob whose pooled residual is pure noise.
    prototype_scale: float = 0.15
    vocabulary: np.ndarray = None  # optional (S, D) override
    class_multisets: list = None  # optional list of per-class word-index lists

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.vocab_size < 2:
            raise ConfigError("need at least 2 sub-action prototypes")
        if self.words_per_class < 1:
            raise ConfigError("classes need at least one sub-action")
        if min(self.frames, self.locations, self.dim) < 1:
            raise ConfigError("frames, locations and dim must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.train_per_class < 1 or self.val_per_class < 0:
            raise ConfigError("need at least one training video per class")
        if self.vocabulary is not None:
            vocab = np.asarray(self.vocabulary, dtype=np.float64)
            if vocab.shape != (self.vocab_size, self.dim):
                raise ConfigError(
                    f"vocabulary shape {vocab.shape} does not match "
                    f"(vocab_size, dim) = ({self.vocab_size}, {self.dim})"
                )
        if self.class_multisets is not None:
            if len(self.class_multisets) != self.num_classes:
                raise ConfigError("need one multiset per class")
            for words in self.class_multisets:
                if not words:
                    raise ConfigError("class multisets must be nonempty")
                if any(not 0 <= w < self.vocab_size for w in words):
                    raise ConfigError("multiset word index out of vocabulary range")
        return self


@dataclass
class SynthDataset:
    train: list  # [(FeatureMap, label), ...]
    val: list
    vocabulary: np.ndarray
    class_multisets: list


def default_class_multisets(num_classes: int, vocab_size: int) -> list:
    """Paired equal-mean, equal-envelope class layout (see module docstring).

    Words 4g..4g+3 of each quadruple group g are (a, b, max(a, b), min(a, b)).
    Each pair of classes is {a, b, t} vs {max, min, t} for a shared third
    word t outside the group. Falls back to overlapping word triples when the
    vocabulary is too small for quadruple groups.
    """
    groups = vocab_size // 4
    if groups < 1:
        return [
            [i % vocab_size, (i + 1) % vocab_size, (i + 2) % vocab_size]
            for i in range(num_classes)
        ]
    multisets = []
    pair = 0
    while len(multisets) + 2 <= num_classes:
        g = pair % groups
        base = 4 * g
        others = [w for w in range(vocab_size) if not base <= w < base + 4]
        third = others[(pair // groups) % len(others)]
        multisets.append([base, base + 1, third])
        multisets.append([base + 2, base + 3, third])
        pair += 1
    if len(multisets) < num_classes:
        step = max(1, vocab_size // 3)
        multisets.append([0, step % vocab_size, (2 * step) % vocab_size])
    return multisets


def build_vocabulary(vocab_size: int, dim: int, scale: float, rng) -> np.ndarray:
    """Prototype matrix with max/min-coupled quadruples, Gaussian remainder."""
    vocab = np.empty((vocab_size, dim), dtype=np.float64)
    groups = vocab_size // 4
    for g in range(groups):
        a, b = scale * rng.standard_normal((2, dim))
        vocab[4 * g] = a
        vocab[4 * g + 1] = b
        vocab[4 * g + 2] = np.maximum(a, b)
        vocab[4 * g + 3] = np.minimum(a, b)
    for w in range(4 * groups, vocab_size):
        vocab[w] = scale * rng.standard_normal(dim)
    return vocab


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Deterministically generate the train/val video sets for a config."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.vocabulary is not None:
        vocab = np.asarray(cfg.vocabulary, dtype=np.float64).copy()
    else:
        vocab = build_vocabulary(cfg.vocab_size, cfg.dim, cfg.prototype_scale, rng)
    if cfg.class_multisets is not None:
        multisets = [list(words) for words in cfg.class_multisets]
    else:
        multisets = default_class_multisets(cfg.num_classes, cfg.vocab_size)

    train, val = [], []
    for label in range(cfg.num_classes):
        words = np.array(multisets[label], dtype=np.int64)
        for index in range(cfg.train_per_class + cfg.val_per_class):
            picks = words[rng.integers(0, len(words), size=cfg.frames)]
            data = vocab[picks][:, None, :] + cfg.noise * rng.standard_normal(
                (cfg.frames, cfg.locations, cfg.dim)
            )
            video = (FeatureMap(data), label)
            if index < cfg.train_per_class:
                train.append(video)
            else:
                val.append(video)
    return SynthDataset(train=train, val=val, vocabulary=vocab, class_multisets=multisets)
