"""Mini-batch training loop and accuracy helpers."""

from __future__ import annotations

import logging

import numpy as np

from .model import STBLN
from .tensor import NumericalError, TrainConfig, sgd_step

log = logging.getLogger(__name__)


def train_epochs(model: STBLN, X: np.ndarray, y: np.ndarray, config: TrainConfig,
                 epochs: int | None = None, rng: np.random.Generator | None = None,
                 on_epoch=None) -> list[float]:
    """Run SGD for ``epochs`` (default ``config.epochs``); return the mean loss of each epoch.

    Samples are reshuffled every epoch.  The per-epoch loss is the
    sample-weighted mean of the batch losses seen during that epoch.
    ``on_epoch(epoch, loss)`` is called after each epoch.
    """
    epochs = config.epochs if epochs is None else epochs
    if rng is None:
        rng = np.random.default_rng(config.seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    params = model.parameters()
    model.zero_grad()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = model.loss_and_grad(X[idx], y[idx], "train", rng)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            sgd_step(params, config)
            total += loss * len(idx)
        mean_loss = total / n
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return history


def predict(model: STBLN, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions."""
    out = []
    for start in range(0, len(X), batch_size):
        out.append(np.argmax(model.forward(X[start : start + batch_size], "eval"), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: STBLN, X: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, X) == y))


def eval_loss(model: STBLN, X: np.ndarray, y: np.ndarray) -> float:
    from .tensor import softmax_cross_entropy

    loss, _ = softmax_cross_entropy(model.forward(X, "eval"), y)
    return loss
