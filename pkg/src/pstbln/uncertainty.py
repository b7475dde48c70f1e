"""Monte Carlo dropout: repeated stochastic inference and its summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import STBLN
from .tensor import softmax

DEFAULT_SAMPLES = 100
HIST_BINS = 10


def run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng([seed, run])


def mc_samples(model: STBLN, X, M: int = DEFAULT_SAMPLES, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """Softmax outputs of ``M`` dropout-active passes, shape ``(M, N, C)``.

    Run ``r`` draws its masks from a generator seeded with ``(seed, r)``, so a
    run is reproducible on its own and independent of ``M``.  Batch norm uses
    its running statistics.
    """
    if M < 1:
        raise ValueError(f"need at least one Monte Carlo sample, got M={M}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    out = np.empty((M, len(X), model.spec.classes))
    for r in range(M):
        rng = run_rng(seed, r)
        for start in range(0, len(X), batch_size):
            out[r, start : start + batch_size] = softmax(model.forward(X[start : start + batch_size], "mc", rng))
    return out


@dataclass
class PredictionDistribution:
    samples: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    predicted_class: int

    @classmethod
    def from_samples(cls, samples) -> "PredictionDistribution":
        s = np.asarray(samples, dtype=np.float64)
        if s.ndim != 2 or len(s) < 1:
            raise ValueError("samples must be a non-empty (M, C) array")
        mean = s.mean(axis=0)
        # shifting by a sample keeps identical samples at exactly zero variance
        var = (s - s[0]).var(axis=0, ddof=1) if len(s) > 1 else np.zeros(s.shape[1])
        return cls(s, mean, var, int(np.argmax(mean)))

    @property
    def uncertainty(self) -> float:
        """Variance of the predicted class."""
        return float(self.variance[self.predicted_class])


def mc_predict(model: STBLN, x, M: int = DEFAULT_SAMPLES, seed: int = 0) -> PredictionDistribution:
    """Predictive distribution of a single ``(2, T, E)`` input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if len(x) != 1:
            raise ValueError("mc_predict takes one sample; use mc_samples for batches")
        x = x[0]
    return PredictionDistribution.from_samples(mc_samples(model, x[None], M, seed)[:, 0])


@dataclass
class UncertaintyReport:
    per_run_accuracy: list[float]
    ensemble_accuracy: float
    mean: float
    stddev: float

    def to_dict(self) -> dict:
        return {
            "per_run_accuracy": [float(a) for a in self.per_run_accuracy],
            "ensemble_accuracy": float(self.ensemble_accuracy),
            "mean": float(self.mean),
            "stddev": float(self.stddev),
        }


def report_from_samples(samples: np.ndarray, labels) -> UncertaintyReport:
    labels = np.asarray(labels)
    per_run = (np.argmax(samples, axis=2) == labels[None, :]).mean(axis=1)
    ensemble = float(np.mean(np.argmax(samples.mean(axis=0), axis=1) == labels))
    std = float(per_run.std(ddof=1)) if len(per_run) > 1 else 0.0
    return UncertaintyReport(per_run.tolist(), ensemble, float(per_run.mean()), std)


def evaluate_mc(model: STBLN, X, y, M: int = DEFAULT_SAMPLES, seed: int = 0) -> UncertaintyReport:
    """Per-run accuracies of ``M`` dropout passes and the accuracy of their averaged prediction."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("evaluate_mc needs a non-empty labelled dataset")
    return report_from_samples(mc_samples(model, X, M, seed), y)


def per_class_report(dist: PredictionDistribution, class_names=None) -> list[dict]:
    """Per-class summary with a 10-bin histogram of the sampled probabilities over [0, 1]."""
    C = dist.samples.shape[1]
    if class_names is None:
        class_names = [str(c) for c in range(C)]
    if len(class_names) != C:
        raise ValueError(f"{len(class_names)} class names for {C} classes")
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    rows = []
    for c, name in enumerate(class_names):
        col = dist.samples[:, c]
        counts, _ = np.histogram(np.clip(col, 0.0, 1.0), bins=edges)
        rows.append({
            "class": name,
            "mean": float(dist.mean[c]),
            "variance": float(dist.variance[c]),
            "min": float(col.min()),
            "max": float(col.max()),
            "histogram": counts.tolist(),
            "bin_edges": edges.tolist(),
        })
    return rows
