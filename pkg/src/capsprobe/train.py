"""Mini-batch training loop shared by every model kind."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import component_rng

log = logging.getLogger(__name__)


@dataclass
class TrainingReport:
    epoch_losses: list = field(default_factory=list)
    train_accuracy: float = 0.0
    correct: int = 0
    total: int = 0
    epochs_run: int = 0
    seconds: float = 0.0  # wall clock; never written to reports


def accuracy(model, images, labels):
    pred = model.predict(images)
    correct = int(np.sum(pred == labels))
    return correct / max(len(labels), 1), correct, len(labels)


def train(model, dataset, epochs, lr, batch=32, seed=0, optimizer="adam", stop_at=None, time_limit=None):
    """Fit ``model`` on ``dataset``; returns per-epoch mean loss and final train accuracy.

    ``stop_at`` ends training early once train accuracy reaches that value;
    ``time_limit`` (seconds) ends it after the current epoch.
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    rng = component_rng(seed, "train")
    params = model.parameters()
    opt = T.Adam(params, lr=lr) if optimizer == "adam" else None
    report = TrainingReport()
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses = []
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss = model.loss(T.Tensor(images[idx]), labels[idx])
            T.backward(loss)
            if opt is not None:
                opt.step()
            else:
                T.sgd_step(params, lr)
            losses.append(loss.item() * len(idx))
        report.epoch_losses.append(float(np.sum(losses) / len(labels)))
        report.epochs_run = epoch + 1
        acc, _, _ = accuracy(model, images, labels) if (stop_at is not None) else (None, 0, 0)
        log.info("epoch %d loss %.4f%s", epoch + 1, report.epoch_losses[-1], "" if acc is None else f" acc {acc:.3f}")
        if stop_at is not None and acc >= stop_at:
            break
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break
    report.train_accuracy, report.correct, report.total = accuracy(model, images, labels)
    report.seconds = time.perf_counter() - t0
    model.trained = True
    return report
