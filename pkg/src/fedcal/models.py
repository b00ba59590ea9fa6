"""Desk-scale strong/weak predictors.

Classification: multinomial logistic regression trained by full-batch
gradient descent on softmax cross-entropy.  Regression: two linear heads
trained on the pinball loss, one per quantile level.  Strength knobs are
training epochs (strong 5, weak 1) and a feature mask restricting weak
models to a seeded random subset of the inputs.

Everything is deterministic given (data, config, seed): zero-initialized
parameters, no minibatching, fixed step counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .partition import TASK_CLASSIFICATION, TASK_REGRESSION, Dataset
from .scores import QuantilePair

STRONG = "strong"
WEAK = "weak"

STEPS_PER_EPOCH = 20
WEAK_FEATURE_FRACTION = 0.25

_DEFAULT_EPOCHS = {STRONG: 5, WEAK: 1}


@dataclass(frozen=True)
class AgentModelConfig:
    """Per-agent training knobs; epochs default by strength (strong 5, weak 1)."""

    strength: str = STRONG
    epochs: int | None = None
    learning_rate: float = 0.5
    feature_mask: tuple[int, ...] | None = None
    quantile_levels: tuple[float, float] = (0.025, 0.975)

    def __post_init__(self):
        if self.strength not in (STRONG, WEAK):
            raise ValidationError(f"strength must be '{STRONG}' or '{WEAK}', got {self.strength!r}")
        if self.epochs is None:
            object.__setattr__(self, "epochs", _DEFAULT_EPOCHS[self.strength])
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not (self.learning_rate > 0.0):
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        lo, hi = self.quantile_levels
        if not (0.0 < lo < hi < 1.0):
            raise ValidationError(f"quantile levels must satisfy 0 < lo < hi < 1, got {self.quantile_levels}")

    @classmethod
    def strong(cls, **kw) -> "AgentModelConfig":
        return cls(strength=STRONG, **kw)

    @classmethod
    def weak(cls, **kw) -> "AgentModelConfig":
        return cls(strength=WEAK, **kw)


def random_feature_mask(dim: int, fraction: float, seed: int) -> tuple[int, ...]:
    """Seeded random subset of feature indices (at least one)."""
    keep = max(1, int(round(dim * fraction)))
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in np.sort(rng.choice(dim, size=keep, replace=False)))


def fit_standardizer(features) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and std from the training split; zero-variance columns
    get std 1 so constant features pass through as zeros."""
    x = np.asarray(features, dtype=np.float64)
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    return mu, sigma


def apply_standardizer(features, mu, sigma) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - mu) / sigma


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss_grad(weights, bias, x, y_onehot):
    """Mean softmax cross-entropy and its gradients.

    weights: (C, d), bias: (C,), x: (n, d), y_onehot: (n, C).
    """
    n = x.shape[0]
    probs = softmax(x @ weights.T + bias)
    eps = 1e-12
    loss = float(-np.sum(y_onehot * np.log(probs + eps)) / n)
    delta = (probs - y_onehot) / n
    grad_w = delta.T @ x
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


@dataclass
class Classifier:
    """Linear softmax classifier; ``feature_mask`` selects the columns it sees."""

    weights: np.ndarray
    bias: np.ndarray
    input_dim: int
    feature_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("classifier parameters must be finite")

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    def _effective(self, x: np.ndarray) -> np.ndarray:
        if self.feature_mask is None:
            return x
        return x[:, list(self.feature_mask)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": 1,
                "kind": "classifier",
                "weights": self.weights.tolist(),
                "bias": self.bias.tolist(),
                "input_dim": self.input_dim,
                "feature_mask": list(self.feature_mask) if self.feature_mask is not None else None,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Classifier":
        doc = json.loads(text)
        if doc.get("kind") != "classifier":
            raise ValidationError("not a classifier document")
        mask = doc["feature_mask"]
        return cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=np.asarray(doc["bias"], dtype=np.float64),
            input_dim=int(doc["input_dim"]),
            feature_mask=tuple(mask) if mask is not None else None,
        )


def _resolve_mask(cfg: AgentModelConfig, dim: int, seed: int) -> tuple[int, ...] | None:
    if cfg.feature_mask is not None:
        mask = tuple(int(i) for i in cfg.feature_mask)
        if any(i < 0 or i >= dim for i in mask):
            raise ValidationError(f"feature mask indices out of range for dim {dim}")
        return mask
    if cfg.strength == WEAK:
        return random_feature_mask(dim, WEAK_FEATURE_FRACTION, seed)
    return None


def train_classifier(train: Dataset, cfg: AgentModelConfig, seed: int) -> Classifier:
    """Full-batch gradient descent from zero-initialized parameters.

    Caller standardizes features first.  epochs=0 leaves the parameters at
    zero, so every prediction is the uniform probability vector.
    """
    if train.task != TASK_CLASSIFICATION:
        raise ValidationError("train_classifier requires a classification dataset")
    labels = np.unique(train.targets)
    if labels.size < 2:
        raise ValidationError("training data contains a single class")
    dim = train.features.shape[1]
    mask = _resolve_mask(cfg, dim, seed)
    x = train.features if mask is None else train.features[:, list(mask)]
    c = train.num_classes
    y_onehot = np.zeros((len(train), c))
    y_onehot[np.arange(len(train)), train.targets] = 1.0

    w = np.zeros((c, x.shape[1]))
    b = np.zeros(c)
    for _ in range(cfg.epochs * STEPS_PER_EPOCH):
        _, gw, gb = cross_entropy_loss_grad(w, b, x, y_onehot)
        w -= cfg.learning_rate * gw
        b -= cfg.learning_rate * gb
    return Classifier(weights=w, bias=b, input_dim=dim, feature_mask=mask)


def predict_proba_batch(model: Classifier, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ValidationError(f"expected {model.input_dim} features, got {x.shape[1]}")
    return softmax(model._effective(x) @ model.weights.T + model.bias)


def predict_proba(model: Classifier, x) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("predict_proba takes a single feature vector")
    return predict_proba_batch(model, x[None, :])[0]


def pinball_loss(u, tau: float):
    """rho_tau(u) = u * (tau - 1{u < 0}); minimized by the tau-quantile."""
    u = np.asarray(u, dtype=np.float64)
    return u * (tau - (u < 0.0))


def pinball_loss_grad(w, b, x, y, tau: float):
    """Mean pinball loss of a linear head and its (sub)gradients.

    The kink at u = 0 uses the u<0 branch value tau - 1; any fixed choice is
    a valid subgradient and this one keeps runs reproducible.
    """
    u = y - (x @ w + b)
    loss = float(np.mean(pinball_loss(u, tau)))
    gpred = -(tau - (u <= 0.0))
    grad_w = x.T @ gpred / x.shape[0]
    grad_b = float(gpred.mean())
    return loss, grad_w, grad_b


@dataclass
class QuantileRegressor:
    """Two linear heads, one per quantile level; crossing outputs get repaired."""

    lo_weights: np.ndarray
    lo_bias: float
    hi_weights: np.ndarray
    hi_bias: float
    input_dim: int
    levels: tuple[float, float] = (0.025, 0.975)
    feature_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        params = np.concatenate([np.ravel(self.lo_weights), np.ravel(self.hi_weights), [self.lo_bias, self.hi_bias]])
        if not np.all(np.isfinite(params)):
            raise ValidationError("regressor parameters must be finite")

    def _effective(self, x: np.ndarray) -> np.ndarray:
        if self.feature_mask is None:
            return x
        return x[:, list(self.feature_mask)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": 1,
                "kind": "quantile_regressor",
                "lo_weights": np.asarray(self.lo_weights).tolist(),
                "lo_bias": self.lo_bias,
                "hi_weights": np.asarray(self.hi_weights).tolist(),
                "hi_bias": self.hi_bias,
                "input_dim": self.input_dim,
                "levels": list(self.levels),
                "feature_mask": list(self.feature_mask) if self.feature_mask is not None else None,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "QuantileRegressor":
        doc = json.loads(text)
        if doc.get("kind") != "quantile_regressor":
            raise ValidationError("not a quantile regressor document")
        mask = doc["feature_mask"]
        return cls(
            lo_weights=np.asarray(doc["lo_weights"], dtype=np.float64),
            lo_bias=float(doc["lo_bias"]),
            hi_weights=np.asarray(doc["hi_weights"], dtype=np.float64),
            hi_bias=float(doc["hi_bias"]),
            input_dim=int(doc["input_dim"]),
            levels=(float(doc["levels"][0]), float(doc["levels"][1])),
            feature_mask=tuple(mask) if mask is not None else None,
        )


def train_quantile_regressor(train: Dataset, cfg: AgentModelConfig, seed: int) -> QuantileRegressor:
    """Gradient descent on the pinball loss, one head per quantile level."""
    if train.task != TASK_REGRESSION:
        raise ValidationError("train_quantile_regressor requires a regression dataset")
    if len(train) < 2:
        raise ValidationError("need at least 2 training samples")
    dim = train.features.shape[1]
    mask = _resolve_mask(cfg, dim, seed)
    x = train.features if mask is None else train.features[:, list(mask)]
    y = train.targets

    heads = []
    for tau in cfg.quantile_levels:
        w = np.zeros(x.shape[1])
        b = 0.0
        for _ in range(cfg.epochs * STEPS_PER_EPOCH):
            _, gw, gb = pinball_loss_grad(w, b, x, y, tau)
            w = w - cfg.learning_rate * gw
            b = b - cfg.learning_rate * gb
        heads.append((w, b))
    (lo_w, lo_b), (hi_w, hi_b) = heads
    return QuantileRegressor(
        lo_weights=lo_w,
        lo_bias=lo_b,
        hi_weights=hi_w,
        hi_bias=hi_b,
        input_dim=dim,
        levels=cfg.quantile_levels,
        feature_mask=mask,
    )


def predict_quantiles_batch(model: QuantileRegressor, x) -> tuple[np.ndarray, np.ndarray]:
    """Raw (lo, hi) head outputs for a feature matrix; no crossing repair."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ValidationError(f"expected {model.input_dim} features, got {x.shape[1]}")
    xe = model._effective(x)
    lo = xe @ model.lo_weights + model.lo_bias
    hi = xe @ model.hi_weights + model.hi_bias
    return lo, hi


def predict_quantiles(model: QuantileRegressor, x) -> QuantilePair:
    """QuantilePair for a single input; crossing heads are swapped and flagged."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("predict_quantiles takes a single feature vector")
    lo, hi = predict_quantiles_batch(model, x[None, :])
    return QuantilePair(float(lo[0]), float(hi[0]))
