"""Desk-scale MLP training: synthetic data, backprop, SGD, and distillation.

Small fully-connected ReLU networks on Gaussian-cluster data stand in for
the large vision models a production distillation pipeline would use; they
are cheap enough to train in seconds while still producing teachers with a
measurable mis-instruction ratio (via label noise and limited capacity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .calibrate import CalibrationConfig, calibrate_batch
from .losses import LossConfig, batch_loss_and_grads
from .probvec import softmax


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss goes non-finite; carries the epoch."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    features: np.ndarray          # (N, D)
    labels: np.ndarray            # (N,) possibly noise-flipped on the train split
    clean_labels: np.ndarray      # (N,) pre-noise assignment
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(self.clean_labels.max()) + 1

    def split(self, name: str):
        idx = {"train": self.train_idx, "valid": self.valid_idx, "test": self.test_idx}[name]
        return self.features[idx], self.labels[idx]


def gen_synthetic(
    n_classes: int,
    n_features: int,
    n_samples: int,
    cluster_spread: float = 1.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Balanced Gaussian-cluster classification data, deterministic per seed.

    One unit-normal centroid per class; points are centroid plus isotropic
    noise of scale ``cluster_spread``. ``label_noise`` flips exactly
    ``round(label_noise * n_train)`` training labels to a uniformly chosen
    wrong class, manufacturing teacher mis-instruction pressure. Splits are
    70/15/15 train/valid/test; only the train split is noised.
    """
    if n_classes < 2 or n_features < 2:
        raise ValueError("need n_classes >= 2 and n_features >= 2")
    if n_samples < n_classes:
        raise ValueError(f"n_samples={n_samples} < n_classes={n_classes}")
    if not 0.0 <= label_noise < 0.5:
        raise ValueError(f"label_noise must lie in [0, 0.5), got {label_noise}")
    if cluster_spread <= 0:
        raise ValueError("cluster_spread must be positive")

    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(n_classes, n_features))
    labels = np.tile(np.arange(n_classes), n_samples // n_classes + 1)[:n_samples]
    rng.shuffle(labels)
    X = centroids[labels] + cluster_spread * rng.normal(size=(n_samples, n_features))

    order = rng.permutation(n_samples)
    n_train = int(round(0.7 * n_samples))
    n_valid = int(round(0.15 * n_samples))
    train_idx = order[:n_train]
    valid_idx = order[n_train : n_train + n_valid]
    test_idx = order[n_train + n_valid :]

    clean = labels.copy()
    noisy = labels.copy()
    n_flip = int(round(label_noise * n_train))
    if n_flip:
        flip = rng.permutation(train_idx)[:n_flip]
        offsets = rng.integers(1, n_classes, size=n_flip)
        noisy[flip] = (clean[flip] + offsets) % n_classes

    return Dataset(X, noisy, clean, train_idx, valid_idx, test_idx)


# ---------------------------------------------------------------------------
# model


@dataclass
class MlpModel:
    """Plain ReLU MLP parameters plus SGD momentum buffers."""

    weights: list
    biases: list
    velocity_w: list = field(default_factory=list)
    velocity_b: list = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity_w:
            self.velocity_w = [np.zeros_like(w) for w in self.weights]
            self.velocity_b = [np.zeros_like(b) for b in self.biases]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.velocity_w],
            [v.copy() for v in self.velocity_b],
        )


def init_mlp(layer_sizes, rng: np.random.Generator) -> MlpModel:
    """He-initialized MLP with the given (input, *hidden, output) sizes."""
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpModel(weights, biases)


def _forward_cached(model: MlpModel, X: np.ndarray):
    acts = [X]
    h = X
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < len(model.weights) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def forward(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Logits for a batch of feature rows."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"feature dim {X.shape[1]} does not match model input {model.weights[0].shape[0]}"
        )
    logits, _ = _forward_cached(model, X)
    return logits


def backward_and_step(
    model: MlpModel,
    features: np.ndarray,
    grad_logits: np.ndarray,
    lr: float,
    momentum: float = 0.0,
) -> MlpModel:
    """One SGD-with-momentum step from gradients w.r.t. the output logits.

    ``grad_logits`` rows are dL/d(logit row); the caller owns any batch-mean
    scaling. The model is updated in place and returned.
    """
    X = np.asarray(features, dtype=np.float64)
    G = np.asarray(grad_logits, dtype=np.float64)
    if G.shape != (X.shape[0], model.n_outputs):
        raise ValueError(f"grad shape {G.shape} does not match (n_samples, {model.n_outputs})")

    _, acts = _forward_cached(model, X)
    delta = G
    for i in reversed(range(len(model.weights))):
        grad_w = acts[i].T @ delta
        grad_b = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
        model.velocity_w[i] = momentum * model.velocity_w[i] + grad_w
        model.velocity_b[i] = momentum * model.velocity_b[i] + grad_b
        model.weights[i] -= lr * model.velocity_w[i]
        model.biases[i] -= lr * model.velocity_b[i]
    return model


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs/batch_size/lr must be nonnegative (batch_size >= 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class TeacherMetrics:
    train_accuracy: float
    test_accuracy: float
    train_misinstruction_ratio: float


@dataclass(frozen=True)
class DistillMetrics:
    test_top1: float
    test_top5: float
    final_loss: float
    loss_curve: tuple
    calibrated_count: int
    dropped_count: int
    calibration_violations: int


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(logits.argmax(axis=1) == labels))


def _topk(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return float("nan")
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def _ce_step_grads(logits: np.ndarray, labels: np.ndarray):
    q = softmax(logits, 1.0)
    n = logits.shape[0]
    loss = float(np.mean(-np.log(q[np.arange(n), labels])))
    grads = q.copy()
    grads[np.arange(n), labels] -= 1.0
    return loss, grads


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_teacher(dataset: Dataset, hidden_sizes, config: TrainConfig):
    """Train a teacher with plain cross-entropy; report accuracy and the
    training-set mis-instruction ratio it will exhibit as a distiller."""
    X_train, y_train = dataset.split("train")
    X_test, y_test = dataset.split("test")
    C = dataset.n_classes

    rng = np.random.default_rng(config.seed)
    model = init_mlp((X_train.shape[1], *hidden_sizes, C), rng)
    for epoch in range(config.epochs):
        for batch in _epoch_batches(len(X_train), config.batch_size, rng):
            logits, _ = _forward_cached(model, X_train[batch])
            loss, grads = _ce_step_grads(logits, y_train[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            backward_and_step(model, X_train[batch], grads / len(batch), config.lr, config.momentum)

    train_logits = forward(model, X_train)
    metrics = TeacherMetrics(
        train_accuracy=_accuracy(train_logits, y_train),
        test_accuracy=_accuracy(forward(model, X_test), y_test),
        train_misinstruction_ratio=float(np.mean(train_logits.argmax(axis=1) != y_train)),
    )
    return model, metrics


def distill_student(dataset: Dataset, teacher: MlpModel, hidden_sizes, config: TrainConfig):
    """Distill a student from a frozen teacher under the configured policy.

    Per batch: soften the teacher logits at the loss temperature, apply the
    calibration policy, then take one combined-loss SGD step. Calibrated
    vectors are asserted to predict the ground truth at runtime; the count
    of violations (always 0 for alpha < 1) is reported in the metrics.
    """
    X_train, y_train = dataset.split("train")
    X_test, y_test = dataset.split("test")
    C = dataset.n_classes
    if teacher.n_outputs != C:
        raise ValueError(f"teacher has {teacher.n_outputs} outputs, dataset has {C} classes")

    cal = config.calibration
    rng = np.random.default_rng(config.seed)
    student = init_mlp((X_train.shape[1], *hidden_sizes, C), rng)

    curve = []
    calibrated_count = 0
    dropped_count = 0
    violations = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in _epoch_batches(len(X_train), config.batch_size, rng):
            Xb, yb = X_train[batch], y_train[batch]
            P = softmax(forward(teacher, Xb), config.loss.tau)
            dropped = np.zeros(len(batch), dtype=bool)
            if cal.policy == "loca":
                P, mis, _, _ = calibrate_batch(P, yb, cal.alpha)
                calibrated_count += int(mis.sum())
                violations += int(np.sum(P[mis].argmax(axis=1) != yb[mis]))
            elif cal.policy == "skip":
                dropped = P.argmax(axis=1) != yb
                dropped_count += int(dropped.sum())

            student_logits = forward(student, Xb)
            totals, _, _, grads = batch_loss_and_grads(P, student_logits, yb, dropped, config.loss)
            mean_loss = float(totals.mean())
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(epoch)
            epoch_losses.append(mean_loss)
            backward_and_step(student, Xb, grads / len(batch), config.lr, config.momentum)
        if epoch_losses:
            curve.append(float(np.mean(epoch_losses)))

    test_logits = forward(student, X_test)
    metrics = DistillMetrics(
        test_top1=_accuracy(test_logits, y_test),
        test_top5=_topk(test_logits, y_test, 5),
        final_loss=curve[-1] if curve else float("nan"),
        loss_curve=tuple(curve),
        calibrated_count=calibrated_count,
        dropped_count=dropped_count,
        calibration_violations=violations,
    )
    return student, metrics


# ---------------------------------------------------------------------------
# estimator wrappers


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Cross-entropy MLP classifier with the usual fit/predict surface."""

    def __init__(self, hidden_sizes=(16,), epochs=30, batch_size=64, lr=0.05,
                 momentum=0.9, seed=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        self.classes_ = np.unique(y)
        C = int(y.max()) + 1
        rng = np.random.default_rng(self.seed)
        model = init_mlp((X.shape[1], *self.hidden_sizes, C), rng)
        for epoch in range(self.epochs):
            for batch in _epoch_batches(len(X), self.batch_size, rng):
                logits, _ = _forward_cached(model, X[batch])
                loss, grads = _ce_step_grads(logits, y[batch])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch)
                backward_and_step(model, X[batch], grads / len(batch), self.lr, self.momentum)
        self.model_ = model
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_array(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X), 1.0)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


class DistilledClassifier(BaseEstimator, ClassifierMixin):
    """Student trained against a fitted teacher under a calibration policy."""

    def __init__(self, teacher=None, hidden_sizes=(8,), policy="none", alpha=0.95,
                 tau=4.0, beta=0.9, gamma=0.1, scale_kd_by_tau_squared=False,
                 epochs=30, batch_size=64, lr=0.05, momentum=0.9, seed=0):
        self.teacher = teacher
        self.hidden_sizes = hidden_sizes
        self.policy = policy
        self.alpha = alpha
        self.tau = tau
        self.beta = beta
        self.gamma = gamma
        self.scale_kd_by_tau_squared = scale_kd_by_tau_squared
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed

    def _teacher_model(self) -> MlpModel:
        if isinstance(self.teacher, MlpModel):
            return self.teacher
        if isinstance(self.teacher, MlpClassifier):
            check_is_fitted(self.teacher, "model_")
            return self.teacher.model_
        raise ValueError("teacher must be an MlpModel or a fitted MlpClassifier")

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        self.classes_ = np.unique(y)
        teacher = self._teacher_model()
        # All rows train; reuse the split-aware loop with a trivial split.
        n = len(X)
        ds = Dataset(X, y, y, np.arange(n), np.arange(0), np.arange(0))
        config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, seed=self.seed,
            loss=LossConfig(self.tau, self.beta, self.gamma, self.scale_kd_by_tau_squared),
            calibration=CalibrationConfig(alpha=self.alpha, policy=self.policy),
        )
        self.model_, self.metrics_ = distill_student(ds, teacher, self.hidden_sizes, config)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_array(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), 1.0)
