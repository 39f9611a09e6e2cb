"""Linear softmax classifier over pooled descriptors and two-stage training.

Stage 1 freezes the codebook and trains only the classifier (descriptors are
pooled once and cached). Stage 2 finetunes classifier and both anchor sets
jointly through the aggregation backward pass. Both stages use Adam with
micro-batch gradient averaging followed by global-norm clipping.
"""

from dataclasses import dataclass

import numpy as np

from .aggregation import pool_descriptor, vlad_backward, vlad_descriptor
from .codebook import Codebook
from .errors import ConfigError, DimensionMismatchError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999


@dataclass
class TrainConfig:
    alpha: float = 1000.0
    num_words: int = 64
    dropout: float = 0.5
    clip_norm: float = 5.0
    stage1_lr: float = 0.01
    stage2_lr: float = 1e-4
    adam_epsilon: float = 1e-4
    accumulation_steps: int = 1
    batch_size: int = 16
    stage1_epochs: int = 60
    stage2_epochs: int = 30
    seed: int = 0
    pooling: str = "vlad"
    fusion: str = "none"
    stream: str = "a"
    # Marker only: input features are precomputed, so there is no upstream
    # backbone to freeze or unfreeze. Recorded for provenance.
    freeze_boundary: bool = True
    tie_assign_anchors: bool = False

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.num_words < 1:
            raise ConfigError("num_words must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if not self.adam_epsilon > 0:
            raise ConfigError("adam_epsilon must be positive")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.pooling not in ("vlad", "avg", "max"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.fusion not in ("none", "concat", "early", "late"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.stream not in ("a", "b"):
            raise ConfigError(f"unknown stream {self.stream!r}")
        return self


@dataclass
class ClassifierModel:
    weights: np.ndarray  # (C, rep_dim)
    bias: np.ndarray  # (C,)
    dropout_rate: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def rep_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.weights.copy(), self.bias.copy(), self.dropout_rate)


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step: int = 0

    @classmethod
    def initial(cls, params) -> "AdamState":
        return cls(
            {name: np.zeros_like(p) for name, p in params.items()},
            {name: np.zeros_like(p) for name, p in params.items()},
            0,
        )


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    train_loss: float
    val_accuracy: float

    def metrics_line(self) -> str:
        return f"{self.epoch}\t{self.stage}\t{self.train_loss:.6f}\t{self.val_accuracy:.6f}"


def classifier_forward(rep, model: ClassifierModel) -> np.ndarray:
    """Logits = W @ rep + b."""
    rep = np.asarray(rep, dtype=np.float64)
    if rep.shape != (model.rep_dim,):
        raise DimensionMismatchError(
            f"representation length {rep.shape} does not match classifier dim "
            f"{model.rep_dim}"
        )
    return model.weights @ rep + model.bias


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def softmax_cross_entropy(logits, label: int):
    """Stable cross-entropy loss and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ConfigError(
            f"label {label} out of range for {logits.shape[0]} classes"
        )
    shifted = logits - logits.max()
    log_z = float(np.log(np.exp(shifted).sum()))
    loss = log_z - float(shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def apply_dropout(rep, rate: float, rng, training: bool = True) -> np.ndarray:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout rate must lie in [0, 1)")
    rep = np.asarray(rep, dtype=np.float64)
    if not training or rate == 0.0:
        return rep
    mask = rng.random(rep.shape) >= rate
    return np.where(mask, rep / (1.0 - rate), 0.0)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale all tensors by max_norm/g when the global L2 norm g exceeds max_norm."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def accumulate_gradients(micro_grads) -> dict:
    """Elementwise mean over a list of same-shaped gradient dicts."""
    micro_grads = list(micro_grads)
    if not micro_grads:
        raise ConfigError("cannot accumulate an empty gradient list")
    names = micro_grads[0].keys()
    for grads in micro_grads[1:]:
        if grads.keys() != names:
            raise DimensionMismatchError("gradient dicts disagree on tensor names")
    return {
        name: sum(g[name] for g in micro_grads) / len(micro_grads) for name in names
    }


def combine_micro_grads(micro_grads, clip_norm: float) -> dict:
    """Micro-batch gradients are averaged first, then clipped (in that order)."""
    return clip_gradients(accumulate_gradients(micro_grads), clip_norm)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, epsilon: float):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if grads.keys() != params.keys():
        raise DimensionMismatchError("gradient dict does not match parameter dict")
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise DimensionMismatchError(f"gradient shape mismatch for {name!r}")
        m = ADAM_BETA1 * state.first_moment[name] + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.second_moment[name] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1**step)
        v_hat = v / (1.0 - ADAM_BETA2**step)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step)


def _batch_slices(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _micro_slices(batch, steps):
    for part in np.array_split(batch, steps):
        if len(part):
            yield part


def _classifier_grads(reps, labels, weights, bias, dropout, rng):
    """Mean loss gradient of the linear head over a (cached-descriptor) batch."""
    n = reps.shape[0]
    if dropout > 0.0:
        keep = rng.random(reps.shape) >= dropout
        reps = np.where(keep, reps / (1.0 - dropout), 0.0)
    logits = reps @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss_sum = float(np.sum(log_z[np.arange(n), 0] - shifted[np.arange(n), labels]))
    g_logits = np.exp(shifted - log_z)
    g_logits[np.arange(n), labels] -= 1.0
    grads = {
        "weights": g_logits.T @ reps / n,
        "bias": g_logits.mean(axis=0),
    }
    return grads, loss_sum


def _accuracy(reps, labels, weights, bias) -> float:
    if reps.shape[0] == 0:
        return float("nan")
    predictions = np.argmax(reps @ weights.T + bias, axis=1)
    return float(np.mean(predictions == labels))


def _pool_all(videos, codebook, mode):
    return np.stack([pool_descriptor(f, codebook, mode) for f, _ in videos])


def train_stage1(train_set, codebook: Codebook, cfg: TrainConfig, val_set=(), num_classes=None):
    """Train the linear classifier over a frozen codebook.

    Descriptors are pooled once up front (the codebook does not move in this
    stage). Returns (model, history) where history holds one EpochRecord per
    epoch.
    """
    cfg.validate()
    train_set = list(train_set)
    val_set = list(val_set)
    if not train_set:
        raise ConfigError("training set is empty")
    labels = np.array([y for _, y in train_set], dtype=np.int64)
    if num_classes is None:
        candidates = [labels.max()] + [y for _, y in val_set]
        num_classes = int(max(candidates)) + 1
    reps = _pool_all(train_set, codebook, cfg.pooling)
    val_reps = _pool_all(val_set, codebook, cfg.pooling) if val_set else np.zeros((0, reps.shape[1]))
    val_labels = np.array([y for _, y in val_set], dtype=np.int64)

    params = {
        "weights": np.zeros((num_classes, reps.shape[1])),
        "bias": np.zeros(num_classes),
    }
    state = AdamState.initial(params)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.stage1_epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for batch in _batch_slices(order, cfg.batch_size):
            micro_grads = []
            for micro in _micro_slices(batch, cfg.accumulation_steps):
                grads, loss_sum = _classifier_grads(
                    reps[micro], labels[micro], params["weights"], params["bias"],
                    cfg.dropout, rng,
                )
                micro_grads.append(grads)
                epoch_loss += loss_sum
            grads = combine_micro_grads(micro_grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, cfg.stage1_lr, cfg.adam_epsilon)
        history.append(
            EpochRecord(
                epoch,
                1,
                epoch_loss / len(train_set),
                _accuracy(val_reps, val_labels, params["weights"], params["bias"]),
            )
        )
    model = ClassifierModel(params["weights"], params["bias"], cfg.dropout)
    return model, history


def _stage2_micro_grads(videos, codebook, weights, bias, cfg, rng):
    """Per-video forward/backward through the aggregation for one micro-batch."""
    shapes = {
        "weights": weights,
        "bias": bias,
        "residual_anchors": codebook.residual_anchors,
        "assign_anchors": codebook.assign_anchors,
    }
    sums = {name: np.zeros_like(p) for name, p in shapes.items()}
    loss_sum = 0.0
    for feature_map, label in videos:
        rep = vlad_descriptor(feature_map, codebook)
        if cfg.dropout > 0.0:
            keep = rng.random(rep.shape) >= cfg.dropout
            scale = np.where(keep, 1.0 / (1.0 - cfg.dropout), 0.0)
        else:
            scale = np.ones_like(rep)
        dropped = rep * scale
        logits = weights @ dropped + bias
        loss, g_logits = softmax_cross_entropy(logits, label)
        loss_sum += loss
        sums["weights"] += np.outer(g_logits, dropped)
        sums["bias"] += g_logits
        g_rep = (weights.T @ g_logits) * scale
        vg = vlad_backward(feature_map, codebook, g_rep)
        sums["residual_anchors"] += vg.residual_anchors
        sums["assign_anchors"] += vg.assign_anchors
    grads = {name: value / len(videos) for name, value in sums.items()}
    if cfg.tie_assign_anchors:
        tied = grads["residual_anchors"] + grads["assign_anchors"]
        grads["residual_anchors"] = tied
        grads["assign_anchors"] = tied
    return grads, loss_sum


def train_stage2(train_set, codebook: Codebook, model: ClassifierModel, cfg: TrainConfig, val_set=()):
    """Jointly finetune the classifier and both codebook anchor sets.

    Only valid for VLAD pooling (the baselines have no codebook parameters).
    Returns (codebook', model', history).
    """
    cfg.validate()
    if cfg.pooling != "vlad":
        raise ConfigError("stage 2 adapts codebook anchors; pooling must be 'vlad'")
    train_set = list(train_set)
    val_set = list(val_set)
    if not train_set:
        raise ConfigError("training set is empty")
    if model.rep_dim != codebook.num_words * codebook.dim:
        raise DimensionMismatchError(
            f"classifier dim {model.rep_dim} does not match codebook K*D "
            f"{codebook.num_words * codebook.dim}"
        )

    params = {
        "weights": model.weights.copy(),
        "bias": model.bias.copy(),
        "residual_anchors": codebook.residual_anchors.copy(),
        "assign_anchors": codebook.assign_anchors.copy(),
    }
    if cfg.tie_assign_anchors:
        # tied mode trains a single anchor set; residual anchors are canonical
        params["assign_anchors"] = params["residual_anchors"].copy()
    state = AdamState.initial(params)
    rng = np.random.default_rng([cfg.seed, 2])
    val_labels = np.array([y for _, y in val_set], dtype=np.int64)
    history = []
    current = Codebook(params["residual_anchors"], params["assign_anchors"], codebook.alpha)
    for epoch in range(cfg.stage2_epochs):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for batch in _batch_slices(order, cfg.batch_size):
            micro_grads = []
            for micro in _micro_slices(batch, cfg.accumulation_steps):
                grads, loss_sum = _stage2_micro_grads(
                    [train_set[i] for i in micro], current,
                    params["weights"], params["bias"], cfg, rng,
                )
                micro_grads.append(grads)
                epoch_loss += loss_sum
            grads = combine_micro_grads(micro_grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, cfg.stage2_lr, cfg.adam_epsilon)
            current = Codebook(
                params["residual_anchors"], params["assign_anchors"], codebook.alpha
            )
        if val_set:
            val_reps = np.stack([vlad_descriptor(f, current) for f, _ in val_set])
            val_acc = _accuracy(val_reps, val_labels, params["weights"], params["bias"])
        else:
            val_acc = float("nan")
        history.append(EpochRecord(epoch, 2, epoch_loss / len(train_set), val_acc))
    final_model = ClassifierModel(params["weights"], params["bias"], cfg.dropout)
    final_codebook = Codebook(
        params["residual_anchors"].copy(), params["assign_anchors"].copy(), codebook.alpha
    )
    return final_codebook, final_model, history
