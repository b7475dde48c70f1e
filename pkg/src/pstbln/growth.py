"""Progressive width/depth growth of an ST-BLN.

Layers are added one at a time.  A new layer starts ``block_size`` channels
wide and is widened by ``block_size`` while the relative drop in training loss
stays at or above ``width_threshold``; a widening that falls short is undone.
Depth grows the same way against ``depth_threshold``, and the layer that fails
the depth test is removed before a final end-to-end fine-tune.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import STBLN, LayerSpec, NetworkSpec, build_model
from .tensor import NumericalError, TrainConfig
from .training import accuracy, eval_loss, train_epochs

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["layer", "iteration", "width", "loss", "alpha", "decision"]
DEPTH_ITERATION = -1


def width_gain(loss_prev: float, loss_curr: float) -> float:
    """Relative training-loss improvement from one widening step to the next."""
    if not loss_prev > 0:
        raise ValueError(f"previous loss must be positive, got {loss_prev}")
    return (loss_prev - loss_curr) / loss_prev


def depth_gain(loss_prev_depth: float, loss_new_depth: float) -> float:
    """Relative training-loss improvement from adding a layer."""
    if not loss_prev_depth > 0:
        raise ValueError(f"previous loss must be positive, got {loss_prev_depth}")
    return (loss_prev_depth - loss_new_depth) / loss_prev_depth


@dataclass
class GrowthConfig:
    block_size: int = 5
    width_threshold: float = 1e-4
    depth_threshold: float = 1e-4
    epochs_per_iteration: int = 30
    max_layers: int = 7
    max_width: int = 64
    final_epochs: int | None = None
    temporal_kernel: int = 3
    dropout: float = 0.2
    seed: int = 0
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not (self.width_threshold > 0 and self.depth_threshold > 0):
            raise ValueError("thresholds must be positive")
        if self.max_layers < 1 or self.max_width < 1:
            raise ValueError("max_layers and max_width must be >= 1")
        if self.epochs_per_iteration < 1:
            raise ValueError("epochs_per_iteration must be >= 1")

    @property
    def fine_tune_epochs(self) -> int:
        return self.train_config.epochs if self.final_epochs is None else self.final_epochs


@dataclass
class TraceRow:
    layer: int
    iteration: int
    width: int
    loss: float
    alpha: float | None
    decision: str


@dataclass
class GrowthTrace:
    rows: list[TraceRow] = field(default_factory=list)
    spec: NetworkSpec | None = None
    metrics: dict = field(default_factory=dict)

    def add(self, *args):
        row = TraceRow(*args)
        self.rows.append(row)
        log.info("layer %d iter %d width %d loss %.6g alpha %s -> %s", row.layer, row.iteration,
                 row.width, row.loss, "-" if row.alpha is None else f"{row.alpha:.3g}", row.decision)
        return row

    def width_rows(self, layer: int) -> list[TraceRow]:
        return [r for r in self.rows if r.layer == layer and r.iteration != DEPTH_ITERATION]

    def depth_rows(self) -> list[TraceRow]:
        return [r for r in self.rows if r.iteration == DEPTH_ITERATION]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.layer, r.iteration, r.width, repr(float(r.loss)),
                        "" if r.alpha is None else repr(float(r.alpha)), r.decision])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "GrowthTrace":
        reader = csv.DictReader(io.StringIO(text))
        trace = GrowthTrace()
        for d in reader:
            trace.rows.append(TraceRow(int(d["layer"]), int(d["iteration"]), int(d["width"]), float(d["loss"]),
                                       None if d["alpha"] == "" else float(d["alpha"]), d["decision"]))
        return trace


def default_trainer(config: GrowthConfig, X, y):
    """A trainer callable ``(model, epochs, rng) -> loss`` running SGD on ``(X, y)``.

    The returned loss is the mean training cross-entropy of the last epoch.
    """
    def run(model: STBLN, epochs: int, rng: np.random.Generator) -> float:
        history = train_epochs(model, X, y, config.train_config, epochs=epochs, rng=rng)
        return history[-1]

    return run


def _checked(loss: float, where: str) -> float:
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite training loss while {where}")
    return float(loss)


def grow_layer(model: STBLN, layer_index: int, trainer, config: GrowthConfig,
               rng: np.random.Generator, trace: GrowthTrace | None = None):
    """Append layer ``layer_index`` and widen it block by block.

    ``model`` is modified in place up to the point of a revert; always use the
    returned model.  Returns ``(model, width, loss, trace)`` where ``loss`` is
    the training loss of the accepted width.
    """
    if trace is None:
        trace = GrowthTrace()
    b = config.block_size
    if len(model.layers) != layer_index:
        raise ValueError(f"model has {len(model.layers)} layers, cannot build layer {layer_index}")
    model.append_layer(LayerSpec(min(b, config.max_width), config.temporal_kernel, config.dropout), rng)
    iteration = 0
    loss = _checked(trainer(model, config.epochs_per_iteration, _iter_rng(config, layer_index, iteration)),
                    f"building layer {layer_index}")
    width = model.layers[-1].width
    trace.add(layer_index, iteration, width, loss, None, "init")
    while True:
        if width + b > config.max_width:
            trace.add(layer_index, iteration, width, loss, None, "cap")
            return model, width, loss, trace
        saved = model.clone()
        iteration += 1
        model.widen_last_layer(b, rng)
        new_loss = _checked(trainer(model, config.epochs_per_iteration, _iter_rng(config, layer_index, iteration)),
                            f"widening layer {layer_index}")
        alpha = width_gain(loss, new_loss)
        if alpha < config.width_threshold:
            trace.add(layer_index, iteration, width + b, new_loss, alpha, "revert")
            return saved, width, loss, trace
        width += b
        loss = new_loss
        trace.add(layer_index, iteration, width, loss, alpha, "accept")


def _iter_rng(config: GrowthConfig, layer: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, 1 + layer, iteration])


def empty_model(edge_count: int, classes: int, frames: int, seed: int = 0) -> STBLN:
    return build_model(NetworkSpec((), edge_count, classes, frames), seed)


def progressive_build(X_train, y_train, config: GrowthConfig, X_val=None, y_val=None,
                      trainer=None, classes: int | None = None):
    """Grow a network on ``(X_train, y_train)``; returns ``(spec, model, trace)``.

    ``trainer(model, epochs, rng) -> loss`` may be injected; by default SGD on
    the training data with ``config.train_config`` is used.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    present = np.unique(y_train)
    if len(present) < 2:
        raise ValueError("progressive growth needs at least 2 classes in the training data")
    C = classes if classes is not None else int(present.max()) + 1
    _, _, T, E = X_train.shape
    if trainer is None:
        trainer = default_trainer(config, X_train, y_train)
    rng = np.random.default_rng(config.seed)
    model = empty_model(E, C, T, config.seed)
    trace = GrowthTrace()

    prev_model, prev_loss = None, None
    for layer in range(config.max_layers):
        model, width, loss, _ = grow_layer(model, layer, trainer, config, rng, trace)
        if prev_model is None:
            trace.add(layer, DEPTH_ITERATION, width, loss, None, "depth_init")
        else:
            alpha = depth_gain(prev_loss, loss)
            if alpha < config.depth_threshold:
                trace.add(layer, DEPTH_ITERATION, width, loss, alpha, "depth_remove")
                model = prev_model
                break
            trace.add(layer, DEPTH_ITERATION, width, loss, alpha, "depth_accept")
        prev_model, prev_loss = model.clone(), loss
        if layer + 1 == config.max_layers:
            trace.add(layer, DEPTH_ITERATION, width, loss, None, "depth_cap")

    final_loss = _checked(trainer(model, config.fine_tune_epochs, np.random.default_rng([config.seed, 0])),
                          "fine-tuning")
    trace.spec = model.spec
    trace.metrics = {"train_loss": final_loss, "params": model.count_params(), "widths": model.spec.widths}
    trace.metrics["train_accuracy"] = accuracy(model, X_train, y_train)
    trace.metrics["train_eval_loss"] = eval_loss(model, X_train, y_train)
    if X_val is not None and y_val is not None and len(y_val):
        trace.metrics["validation_accuracy"] = accuracy(model, X_val, y_val)
        trace.metrics["validation_loss"] = eval_loss(model, X_val, y_val)
    return model.spec, model, trace
