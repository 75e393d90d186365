"""Training loop with early stopping, and the weighted evaluation metrics.

Training follows the fixed benchmark protocol: Adam at 1e-4, mini-batches
of 16 with the last partial batch kept, a 50-epoch cap, and early stopping
on validation loss with patience 10, returning the best-validation-loss
checkpoint.  The validation set is carved stratified from the training
split; the test set never influences stopping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import stratified_split

NUM_CLASSES = 5
EVAL_BATCH = 64


class DataError(ValueError):
    """Training data that cannot satisfy the protocol (empty class, etc.)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.patience) <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, patience and learning_rate must be positive")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_seconds: float

    def key_fields(self) -> tuple:
        """The deterministic fields (everything except wall time)."""
        return (self.epoch, self.train_loss, self.val_loss, self.val_accuracy)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    zero_division: bool = False


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    weighted_specificity: float
    per_class: list[ClassMetrics] = field(default_factory=list)


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes, dtype=np.float32)[labels]


def confusion_matrix(true_labels, predicted_labels, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise ValueError("label arrays must align")
    for arr in (true_labels, predicted_labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted_labels), 1)
    return ConfusionMatrix(counts=counts)


def _safe_ratio(num: float, denom: float) -> tuple[float, bool]:
    if denom == 0:
        return 0.0, True
    return num / denom, False


def metrics_from_confusion(matrix: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest precision/recall/F1/specificity plus weighted means.

    Zero-denominator cases report 0 with a per-class flag instead of NaN.
    Balanced accuracy (mean per-class recall) is reported alongside plain
    accuracy since the printed form of the accuracy equation is ambiguous
    between the two readings.
    """
    counts = matrix.counts
    k = counts.shape[0]
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class = []
    for c in range(k):
        tp = counts[c, c]
        fn = counts[c].sum() - tp
        fp = counts[:, c].sum() - tp
        tn = total - tp - fn - fp
        precision, p_flag = _safe_ratio(tp, tp + fp)
        recall, r_flag = _safe_ratio(tp, tp + fn)
        f1, f_flag = _safe_ratio(2.0 * precision * recall, precision + recall)
        specificity, s_flag = _safe_ratio(tn, fp + tn)
        per_class.append(
            ClassMetrics(
                precision=float(precision),
                recall=float(recall),
                f1=float(f1),
                specificity=float(specificity),
                support=int(tp + fn),
                zero_division=p_flag or r_flag or f_flag or s_flag,
            )
        )
    supports = np.array([m.support for m in per_class], dtype=np.float64)
    weights = supports / supports.sum()
    return MetricsReport(
        accuracy=float(np.trace(counts) / total),
        balanced_accuracy=float(np.mean([m.recall for m in per_class])),
        weighted_precision=float(np.sum(weights * [m.precision for m in per_class])),
        weighted_recall=float(np.sum(weights * [m.recall for m in per_class])),
        weighted_f1=float(np.sum(weights * [m.f1 for m in per_class])),
        weighted_specificity=float(np.sum(weights * [m.specificity for m in per_class])),
        per_class=per_class,
    )


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _batched_predictions(model, inputs: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    probs = []
    for i in range(0, inputs.shape[0], batch):
        probs.append(model.forward(inputs[i : i + batch]))
    return np.concatenate(probs, axis=0)


def _mean_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    idx = np.arange(labels.size)
    return float(-np.mean(np.log(np.maximum(probs[idx, labels], 1e-12))))


def evaluate_arrays(model, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(mean cross-entropy, accuracy, predictions) on an eval-mode model."""
    probs = _batched_predictions(model, inputs)
    predictions = probs.argmax(axis=1)
    loss = _mean_loss(probs, labels)
    accuracy = float(np.mean(predictions == labels))
    return loss, accuracy, predictions


def train(model, train_inputs: np.ndarray, train_labels: np.ndarray, config: TrainConfig):
    """Train with per-epoch validation and patience-based early stopping.

    Returns (model restored to its best checkpoint, epoch logs, checkpoint
    arrays).  The model object is trained in place.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if train_inputs.shape[0] == 0:
        raise DataError("empty training set")
    if train_inputs.shape[0] != train_labels.shape[0]:
        raise DataError("inputs and labels must align")

    try:
        split = stratified_split(
            train_labels, ratio=1.0 - config.val_fraction, mode="segment", seed=config.seed
        )
    except Exception as exc:
        raise DataError(f"cannot carve validation split: {exc}") from exc
    fit_idx, val_idx = split.train_indices, split.test_indices
    if len(np.unique(train_labels[fit_idx])) != len(np.unique(train_labels)):
        raise DataError("a class vanished from the training side of the validation carve-out")
    if val_idx.size == 0:
        raise DataError("validation carve-out is empty")

    x_fit, y_fit = train_inputs[fit_idx], train_labels[fit_idx]
    x_val, y_val = train_inputs[val_idx], train_labels[val_idx]
    targets_fit = one_hot(y_fit)

    rng = np.random.default_rng(config.seed)
    logs: list[EpochLog] = []
    best_state = None
    best_val_loss = np.inf
    epochs_since_best = 0

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(x_fit.shape[0])
        total_loss = 0.0
        for b0 in range(0, order.size, config.batch_size):
            batch_idx = order[b0 : b0 + config.batch_size]
            tape = ad.Tape()
            logits = model.forward_logits(x_fit[batch_idx], tape, training=True)
            loss = ad.softmax_cross_entropy(tape, logits, targets_fit[batch_idx])
            tape.backward(loss)
            ad.adam_step(model.parameters, lr=config.learning_rate)
            model.zero_grad()
            total_loss += float(loss.data) * batch_idx.size
        train_loss = total_loss / order.size

        val_loss, val_accuracy, _ = evaluate_arrays(model, x_val, y_val)
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_accuracy=val_accuracy,
                wall_seconds=time.perf_counter() - started,
            )
        )

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_state = model.snapshot()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    model.load_state(best_state)
    return model, logs, best_state


def evaluate(model, test_inputs: np.ndarray, test_labels: np.ndarray) -> tuple[ConfusionMatrix, MetricsReport]:
    """Confusion matrix and metrics report for an eval-mode model."""
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if test_inputs.shape[0] == 0:
        raise ValueError("empty test set")
    _, _, predictions = evaluate_arrays(model, test_inputs, test_labels)
    matrix = confusion_matrix(test_labels, predictions, num_classes=model.spec.num_classes)
    return matrix, metrics_from_confusion(matrix)


# --------------------------------------------------------------------------
# Text emission
# --------------------------------------------------------------------------

def format_epoch_logs(logs: list[EpochLog]) -> str:
    lines = ["epoch\ttrain_loss\tval_loss\tval_accuracy\twall_seconds"]
    for log in logs:
        lines.append(
            f"{log.epoch}\t{log.train_loss:.6f}\t{log.val_loss:.6f}\t{log.val_accuracy:.6f}\t{log.wall_seconds:.3f}"
        )
    return "\n".join(lines) + "\n"


def parse_epoch_logs(text: str) -> list[EpochLog]:
    logs = []
    for line in text.strip().splitlines()[1:]:
        epoch, train_loss, val_loss, val_accuracy, wall = line.split("\t")
        logs.append(
            EpochLog(int(epoch), float(train_loss), float(val_loss), float(val_accuracy), float(wall))
        )
    return logs


def format_confusion(matrix: ConfusionMatrix, class_names: list[str]) -> str:
    width = max(len(name) for name in class_names) + 2
    header = " " * width + "".join(f"{name:>{width}}" for name in class_names)
    lines = [header]
    for name, row in zip(class_names, matrix.counts):
        lines.append(f"{name:>{width}}" + "".join(f"{int(v):>{width}}" for v in row))
    return "\n".join(lines) + "\n"


def format_metrics(report: MetricsReport, class_names: list[str]) -> str:
    lines = [
        f"accuracy\t{report.accuracy:.6f}",
        f"balanced_accuracy\t{report.balanced_accuracy:.6f}",
        f"weighted_precision\t{report.weighted_precision:.6f}",
        f"weighted_recall\t{report.weighted_recall:.6f}",
        f"weighted_f1\t{report.weighted_f1:.6f}",
        f"weighted_specificity\t{report.weighted_specificity:.6f}",
    ]
    for name, m in zip(class_names, report.per_class):
        flag = "\tzero_division" if m.zero_division else ""
        lines.append(
            f"class\t{name}\tprecision\t{m.precision:.6f}\trecall\t{m.recall:.6f}"
            f"\tf1\t{m.f1:.6f}\tspecificity\t{m.specificity:.6f}\tsupport\t{m.support}{flag}"
        )
    return "\n".join(lines) + "\n"
