"""Loss, optimizer, training loop and the metric suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import NumericsError
from .network import Model
from .tensor import Tensor, log, maximum, mul, no_grad, reduce_mean, reduce_sum

__all__ = [
    "Metrics",
    "EpochRecord",
    "Adam",
    "cross_entropy_loss",
    "train",
    "evaluate",
    "metrics_from_predictions",
]

LOG_CLAMP = 1e-12


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # (num_classes, num_classes), rows = true label


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_acc: float


def cross_entropy_loss(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label], with p clamped at 1e-12.

    ``probs`` is (num_classes,) with an int label, or (batch, num_classes)
    with a label sequence.
    """
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    num_classes = probs.shape[-1]
    if labels_arr.min() < 0 or labels_arr.max() >= num_classes:
        raise ValueError(
            f"label out of range: {labels_arr.min()}..{labels_arr.max()} for {num_classes} classes"
        )
    if probs.ndim == 1:
        expected = (1,)
    else:
        expected = probs.shape[:-1]
    if labels_arr.shape != expected:
        raise ValueError(f"labels shape {labels_arr.shape} does not match probs {probs.shape}")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    np.put_along_axis(
        onehot.reshape(-1, num_classes), labels_arr.reshape(-1, 1), 1.0, axis=-1
    )
    picked = reduce_sum(mul(probs, Tensor(onehot)), axis=-1)
    clamped = maximum(picked, Tensor(np.asarray(LOG_CLAMP, dtype=probs.dtype)))
    return -reduce_mean(log(clamped))


class Adam:
    """Adam with bias correction (defaults beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, params, lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in optimizer step {self.t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def _pool_rng(model: Model, seed: int) -> np.random.Generator | None:
    if model.config.pooling == "stochastic":
        return np.random.default_rng(np.random.SeedSequence([seed, 0xB00C]))
    return None


def train(
    model: Model,
    dataset: Dataset,
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 5e-5,
    seed: int = 0,
) -> tuple[Model, list[EpochRecord]]:
    """Seeded-shuffle minibatch training; deterministic at a fixed seed.

    A non-finite loss or gradient aborts with the offending epoch/batch in
    the error message.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}"
        )
    optimizer = Adam(model.parameters(), lr=lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    pool_rng = _pool_rng(model, seed)
    records: list[EpochRecord] = []
    n = len(dataset)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for batch_index, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            images = Tensor(dataset.images[idx].astype(model.dtype))
            labels = dataset.labels[idx]
            try:
                probs = model.forward_classify(images, rng=pool_rng, training=True)
                loss = cross_entropy_loss(probs, labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except NumericsError as exc:
                raise NumericsError(
                    f"training aborted at epoch {epoch} batch {batch_index}: {exc}"
                ) from exc
            total_loss += loss.item() * len(idx)
            correct += int((np.argmax(probs.data, axis=-1) == labels).sum())
        records.append(
            EpochRecord(epoch=epoch, mean_loss=total_loss / n, train_acc=correct / n)
        )
    return model, records


def metrics_from_predictions(
    predictions: np.ndarray, labels: np.ndarray, num_classes: int
) -> Metrics:
    """Confusion matrix and macro-averaged metrics.

    Classes with a zero denominator contribute 0 to the macro averages.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if len(labels) == 0:
        raise ValueError("cannot compute metrics on an empty dataset")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)

    accuracy = float(np.trace(confusion)) / float(len(labels))
    precisions, recalls, f1s = [], [], []
    for c in range(num_classes):
        tp = float(confusion[c, c])
        pred_c = float(confusion[:, c].sum())
        true_c = float(confusion[c, :].sum())
        prec = tp / pred_c if pred_c > 0 else 0.0
        rec = tp / true_c if true_c > 0 else 0.0
        f1 = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return Metrics(
        accuracy=accuracy,
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
        confusion=confusion,
    )


def evaluate(model: Model, dataset: Dataset, batch_size: int = 32) -> Metrics:
    """Deterministic evaluation (stochastic pooling runs in expectation mode)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}"
        )
    preds = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = Tensor(dataset.images[start : start + batch_size].astype(model.dtype))
            probs = model.forward_classify(images)
            preds.append(np.argmax(probs.data, axis=-1))
    predictions = np.concatenate(preds)
    return metrics_from_predictions(predictions, dataset.labels, model.config.num_classes)
