"""Stability-regularized training of concept-bottleneck models.

The trainer fits a linear concept predictor (features -> sigmoid concepts)
and a linear head (concepts -> logits) with mini-batch SGD on

    total = lambda_c * BCE(concepts) + lambda_y * CE(logits)
          + lambda_s(epoch) * stability + lambda_r * sparsity

where the stability term -log(1 + ||delta_min||^2) rewards large minimal
attack perturbations. The stability term is evaluated at the ground-truth
concepts against the runner-up class, so its analytic gradient touches
only the head parameters; everything else backpropagates normally.
lambda_s ramps linearly over the first warmup_epochs so the predictor can
settle before boundaries get pushed outward.

Concept-only datasets (no input features) are trained head-only: the
concept loss is zero and logits are computed from the ground-truth
concepts directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import AttackConfig
from .core import Dataset, LabeledSample, LinearConceptPredictor, LinearHead, logits, sigmoid
from .errors import (
    DegenerateDirectionError,
    MetricError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .metrics import DatasetRobustness, dataset_robustness

GRAD_CLIP_NORM = 10.0  # stability gradients can spike near parallel weight rows
_BCE_CLIP = 1e-7

TARGET_RULES = ("true_runner_up", "fixed")
LR_SCHEDULES = ("constant", "cosine")
OPTIMIZERS = ("adam", "sgd")
_ADAM_BETA1, _ADAM_BETA2, _ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_y: float = 1.0
    lambda_s_max: float = 0.0
    lambda_r: float = 0.0
    warmup_epochs: int = 5

    def __post_init__(self):
        for name in ("lambda_c", "lambda_y", "lambda_s_max", "lambda_r"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and >= 0")
        if self.warmup_epochs < 0:
            raise ParameterError("warmup_epochs must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    target_class_rule: str = "true_runner_up"
    fixed_target: Optional[int] = None  # only read when target_class_rule == "fixed"
    lr_schedule: str = "constant"
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.target_class_rule not in TARGET_RULES:
            raise ParameterError(f"unknown target rule {self.target_class_rule!r}")
        if self.target_class_rule == "fixed" and self.fixed_target is None:
            raise ParameterError("target_class_rule 'fixed' needs fixed_target")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ParameterError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainEpochRow:
    epoch: int
    concept_loss: float
    class_loss: float
    stability_loss: float
    total_loss: float
    stability_weight: float
    val_accuracy: float
    val_mean_attackability: float


@dataclass(frozen=True)
class TrainLog:
    rows: tuple[TrainEpochRow, ...]

    def final(self) -> TrainEpochRow:
        return self.rows[-1]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def concept_loss(predicted, truth) -> float:
    """Mean binary cross-entropy over concepts; predictions clipped away from {0,1}."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    p = np.clip(p, _BCE_CLIP, 1.0 - _BCE_CLIP)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def class_loss(class_logits, y_star: int) -> float:
    """Softmax cross-entropy, stabilized by max subtraction."""
    z = np.asarray(class_logits, dtype=np.float64)
    if not 0 <= y_star < z.size:
        raise ParameterError(f"label {y_star} out of range for {z.size} classes")
    shifted = z - z.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[y_star])


def runner_up_class(head: LinearHead, c_star, y_star: int) -> int:
    """Highest-scoring class other than y*, ties to the lowest index."""
    scores = logits(head, c_star).copy()
    scores[y_star] = -np.inf
    return int(np.argmax(scores))


def _training_target(head: LinearHead, sample: LabeledSample, cfg: TrainConfig) -> int:
    if cfg.target_class_rule == "fixed":
        t = int(cfg.fixed_target)
        if not 0 <= t < head.num_classes:
            raise ParameterError(f"fixed_target {t} out of range")
        if t == sample.label:
            raise ParameterError("fixed_target equals the sample label")
        return t
    return runner_up_class(head, sample.concepts, sample.label)


def min_perturbation_norm(head: LinearHead, c_star, y_star: int, t: int,
                          cfg: AttackConfig = AttackConfig()) -> float:
    """Single-constraint minimal-norm distance to the t-vs-y* boundary.

    Zero when the target already wins by the decision margin; this is the
    quantity the stability loss and its analytic gradient are built on.
    """
    scores = logits(head, c_star)
    direction = head.weights[t] - head.weights[y_star]
    denom = float(np.linalg.norm(direction))
    if denom == 0.0:
        raise DegenerateDirectionError(f"classes {t} and {y_star} share a weight row")
    gap = float(scores[y_star] - scores[t]) + cfg.epsilon
    return max(gap, 0.0) / denom


def stability_loss_at(head: LinearHead, c_star, y_star: int, t: int,
                      cfg: AttackConfig = AttackConfig()) -> float:
    """-log(1 + ||delta_min||^2) against a fixed target class."""
    norm = min_perturbation_norm(head, c_star, y_star, t, cfg)
    return -math.log1p(norm * norm)


def stability_loss(head: LinearHead, sample: LabeledSample,
                   cfg: AttackConfig = AttackConfig(),
                   train_cfg: TrainConfig = TrainConfig()) -> float:
    """Stability loss with the target picked by the configured rule (runner-up by default)."""
    t = _training_target(head, sample, train_cfg)
    return stability_loss_at(head, sample.concepts, sample.label, t, cfg)


def effective_stability_weight(w: LossWeights, epoch: int) -> float:
    """Linear warmup: lambda_s_max * min(1, epoch / warmup_epochs)."""
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    if w.warmup_epochs == 0:
        return w.lambda_s_max
    return w.lambda_s_max * min(1.0, epoch / w.warmup_epochs)


def total_loss(l_c: float, l_y: float, l_s: float, l_r: float,
               w: LossWeights, epoch: int) -> float:
    for name, v in (("l_c", l_c), ("l_y", l_y), ("l_s", l_s), ("l_r", l_r)):
        if not math.isfinite(v):
            raise ParameterError(f"loss component {name} is not finite")
    return (
        w.lambda_c * l_c
        + w.lambda_y * l_y
        + effective_stability_weight(w, epoch) * l_s
        + w.lambda_r * l_r
    )


def stability_grad(head: LinearHead, sample: LabeledSample, t: int,
                   cfg: AttackConfig = AttackConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the stability loss w.r.t. head weights and bias.

    With n = ||w_t - w_y*||, gap = logit gap + eps and ||delta|| = gap / n:

        dL/dtheta = -(2||delta|| / (1 + ||delta||^2)) * d||delta||/dtheta
        d||delta||/dW_ij = s_i * (c*_j / n + gap * (w_t - w_y*)_j / n^3)
        d||delta||/db_i  = s_i / n,   s_i = 1[i=y*] - 1[i=t]

    Only the y* and t rows are nonzero; the gradient vanishes when the
    clamped perturbation is zero.
    """
    y_star = sample.label
    if t == y_star:
        raise ParameterError("target class must differ from the true class")
    c_star = np.asarray(sample.concepts, dtype=np.float64)
    direction = head.weights[t] - head.weights[y_star]
    n = float(np.linalg.norm(direction))
    if n == 0.0:
        raise DegenerateDirectionError(f"classes {t} and {y_star} share a weight row")
    scores = logits(head, c_star)
    gap = float(scores[y_star] - scores[t]) + cfg.epsilon
    d_w = np.zeros_like(head.weights)
    d_b = np.zeros_like(head.bias)
    if gap <= 0.0:
        return d_w, d_b
    norm = gap / n
    prefactor = -2.0 * norm / (1.0 + norm * norm)
    row = c_star / n + gap * direction / n**3
    d_w[y_star] = prefactor * row
    d_w[t] = -prefactor * row
    d_b[y_star] = prefactor / n
    d_b[t] = -prefactor / n
    return d_w, d_b


# ---------------------------------------------------------------------------
# optimizer loop
# ---------------------------------------------------------------------------


def initial_parameters(num_concepts: int, num_classes: int, num_features: int, seed: int):
    """Seeded Gaussian init (zero biases). Exposed so tests can replay single steps."""
    rng = np.random.default_rng(seed)
    w_pred = (
        rng.normal(0.0, 1.0 / math.sqrt(num_features), size=(num_concepts, num_features))
        if num_features > 0
        else None
    )
    b_pred = np.zeros(num_concepts) if num_features > 0 else None
    w_head = rng.normal(0.0, 1.0 / math.sqrt(num_concepts), size=(num_classes, num_concepts))
    b_head = np.zeros(num_classes)
    return w_pred, b_pred, w_head, b_head


def evaluate_accuracy(predictor: Optional[LinearConceptPredictor], head: LinearHead,
                      dataset: Dataset) -> float:
    """Top-1 accuracy; concept-only datasets are scored on ground-truth concepts."""
    concepts = dataset.concept_matrix()
    if predictor is not None and dataset.num_features > 0:
        z = dataset.feature_matrix() @ predictor.weights.T + predictor.bias
        concepts = sigmoid(z)
    scores = concepts @ head.weights.T + head.bias
    return float(np.mean(np.argmax(scores, axis=1) == dataset.labels()))


def _check_finite(epoch: int, batch: int, *arrays) -> None:
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"non-finite value at epoch {epoch}, batch {batch}")


def train(
    d_train: Dataset,
    d_val: Dataset,
    w: LossWeights,
    cfg: TrainConfig,
    attack_cfg: AttackConfig = AttackConfig(),
) -> tuple[Optional[LinearConceptPredictor], LinearHead, TrainLog]:
    """Mini-batch SGD on the combined objective; deterministic per seed.

    Returns the fitted predictor (None for concept-only data), the head,
    and one log row per epoch with losses and validation metrics.
    """
    if (d_train.num_concepts, d_train.num_classes, d_train.num_features) != (
        d_val.num_concepts, d_val.num_classes, d_val.num_features,
    ):
        raise ShapeError("train and validation datasets disagree on dimensions")
    if len(d_train) == 0:
        raise ParameterError("training dataset is empty")

    n = len(d_train)
    k, c_dim, d_dim = d_train.num_concepts, d_train.num_classes, d_train.num_features
    has_features = d_dim > 0
    w_pred, b_pred, w_head, b_head = initial_parameters(k, c_dim, d_dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    features = d_train.feature_matrix() if has_features else None
    concepts_true = d_train.concept_matrix()
    labels = d_train.labels()
    onehot = np.eye(c_dim)[labels]

    params = [w_head, b_head] + ([w_pred, b_pred] if has_features else [])
    adam_m = [np.zeros_like(p) for p in params]
    adam_v = [np.zeros_like(p) for p in params]
    adam_steps = 0

    rows = []
    for epoch in range(cfg.epochs):
        lam_s = effective_stability_weight(w, epoch)
        lr = cfg.learning_rate
        if cfg.lr_schedule == "cosine":
            lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        perm = rng.permutation(n)
        sums = {"l_c": 0.0, "l_y": 0.0, "l_s": 0.0, "l_total": 0.0}

        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            b = idx.size
            c_true = concepts_true[idx]
            y = labels[idx]
            y_onehot = onehot[idx]

            if has_features:
                x = features[idx]
                z = x @ w_pred.T + b_pred
                c_hat = sigmoid(z)
            else:
                c_hat = c_true

            scores = c_hat @ w_head.T + b_head
            shifted = scores - scores.max(axis=1, keepdims=True)
            expz = np.exp(shifted)
            softmax = expz / expz.sum(axis=1, keepdims=True)

            l_y = float(np.mean(-shifted[np.arange(b), y] + np.log(expz.sum(axis=1))))
            l_c = concept_loss(c_hat, c_true) if has_features else 0.0
            l_r = float(np.mean(np.abs(c_hat))) if w.lambda_r > 0 else 0.0

            # head gradients: cross-entropy + stability (clamped samples contribute zero)
            d_scores = w.lambda_y * (softmax - y_onehot) / b
            g_w_head = d_scores.T @ c_hat
            g_b_head = d_scores.sum(axis=0)
            l_s = 0.0
            head_now = LinearHead(w_head.copy(), b_head.copy())
            for j in idx:
                sample = d_train.samples[j]
                if cfg.target_class_rule == "fixed" and sample.label == cfg.fixed_target:
                    continue
                try:
                    t = _training_target(head_now, sample, cfg)
                    l_s += stability_loss_at(head_now, sample.concepts, sample.label, t, attack_cfg)
                    if lam_s > 0:
                        gs_w, gs_b = stability_grad(head_now, sample, t, attack_cfg)
                        g_w_head += lam_s * gs_w / b
                        g_b_head += lam_s * gs_b / b
                except DegenerateDirectionError:
                    continue
            l_s /= b

            g_w_pred = g_b_pred = None
            if has_features:
                d_chat = d_scores @ w_head
                d_chat += w.lambda_c * (c_hat - c_true) / (b * k)
                if w.lambda_r > 0:
                    d_chat += w.lambda_r * np.sign(c_hat) / (b * k)
                d_z = d_chat * c_hat * (1.0 - c_hat)
                g_w_pred = d_z.T @ x
                g_b_pred = d_z.sum(axis=0)

            # coupled L2 weight decay, then global-norm clipping
            g_w_head += cfg.weight_decay * w_head
            g_b_head += cfg.weight_decay * b_head
            grads = [g_w_head, g_b_head]
            if has_features:
                g_w_pred += cfg.weight_decay * w_pred
                g_b_pred += cfg.weight_decay * b_pred
                grads += [g_w_pred, g_b_pred]
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if gnorm > GRAD_CLIP_NORM:
                scale = GRAD_CLIP_NORM / gnorm
                for g in grads:
                    g *= scale

            if cfg.optimizer == "adam":
                adam_steps += 1
                corr1 = 1.0 - _ADAM_BETA1**adam_steps
                corr2 = 1.0 - _ADAM_BETA2**adam_steps
                for param, g, m, v in zip(params, grads, adam_m, adam_v):
                    m += (1.0 - _ADAM_BETA1) * (g - m)
                    v += (1.0 - _ADAM_BETA2) * (g * g - v)
                    param -= lr * (m / corr1) / (np.sqrt(v / corr2) + _ADAM_EPS)
            else:
                for param, g in zip(params, grads):
                    param -= lr * g

            l_total = (w.lambda_c * l_c + w.lambda_y * l_y
                       + lam_s * l_s + w.lambda_r * l_r)
            _check_finite(epoch, bi, w_head, b_head, w_pred, b_pred,
                          np.array([l_total]))
            for key, val in (("l_c", l_c), ("l_y", l_y), ("l_s", l_s), ("l_total", l_total)):
                sums[key] += val * b

        head_now = LinearHead(w_head.copy(), b_head.copy())
        predictor_now = (
            LinearConceptPredictor(w_pred.copy(), b_pred.copy()) if has_features else None
        )
        try:
            val_att = dataset_robustness(head_now, d_val, attack_cfg).mean_attackability
        except (MetricError, ParameterError):
            val_att = math.nan
        rows.append(
            TrainEpochRow(
                epoch=epoch,
                concept_loss=sums["l_c"] / n,
                class_loss=sums["l_y"] / n,
                stability_loss=sums["l_s"] / n,
                total_loss=sums["l_total"] / n,
                stability_weight=lam_s,
                val_accuracy=evaluate_accuracy(predictor_now, head_now, d_val),
                val_mean_attackability=val_att,
            )
        )

    return predictor_now, head_now, TrainLog(rows=tuple(rows))


@dataclass(frozen=True)
class BoundDiagnostic:
    """Exponential robustness-bound check: logged, never asserted."""

    lhs: float  # empirical E[||delta_min||^2]
    rhs: float  # exp(-lambda_s * E[stability] / (lambda_c + lambda_y)) - 1
    holds: bool


def robustness_bound_report(log: TrainLog, w: LossWeights,
                            final_metrics: DatasetRobustness) -> BoundDiagnostic:
    expected_stability = log.final().stability_loss
    denom = w.lambda_c + w.lambda_y
    if denom == 0:
        raise ParameterError("lambda_c + lambda_y must be positive")
    rhs = math.exp(-w.lambda_s_max * expected_stability / denom) - 1.0
    lhs = final_metrics.mean_sq_rho
    holds = bool(math.isfinite(lhs) and lhs >= rhs)
    return BoundDiagnostic(lhs=lhs, rhs=rhs, holds=holds)
