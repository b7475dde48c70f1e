"""From raw landmark sequences to batched ``(N, 2, T, E)`` arrays."""

from __future__ import annotations

import numpy as np

from .landmarks import (
    NOSE_INDEX,
    GraphTopology,
    LandmarkSequence,
    build_topology,
    canonical_frame,
    prepare_sequence,
    select_frames,
    sequence_to_tensor,
)


def fit_frames(sequence: LandmarkSequence, mode: str, frames: int) -> LandmarkSequence:
    """Bring a sequence to exactly ``frames`` frames.

    ``peak4`` requires ``frames == 4``; ``uniform`` samples or tiles;
    ``exact`` only checks the count.
    """
    if mode == "peak4":
        if frames != 4:
            raise ValueError("peak4 selection yields exactly 4 frames")
        return select_frames(sequence, "peak4")
    if mode == "uniform":
        return select_frames(sequence, "uniform", frames)
    if mode == "exact":
        if sequence.num_frames != frames:
            raise ValueError(f"sequence {sequence.sequence_id!r} has {sequence.num_frames} frames, expected {frames}")
        return sequence
    raise ValueError(f"unknown frame mode {mode!r}")


def prepare(sequences, mode: str = "peak4", frames: int = 4) -> list[LandmarkSequence]:
    """Frame selection, 68 -> 51 reduction and per-frame nose centering."""
    return [prepare_sequence(fit_frames(s, mode, frames)) for s in sequences]


def dataset_topology(prepared, master_index: int = NOSE_INDEX) -> GraphTopology:
    """Shared topology triangulated on the mean centred frame of ``prepared``."""
    return build_topology(canonical_frame(prepared), master_index)


def to_arrays(prepared, topology: GraphTopology) -> tuple[np.ndarray, np.ndarray]:
    if not prepared:
        raise ValueError("no sequences")
    X = np.stack([sequence_to_tensor(s, topology) for s in prepared])
    y = np.array([s.label for s in prepared], dtype=np.int64)
    return X, y


def feature_scale(X: np.ndarray) -> float:
    """Dataset-level scalar (std of all edge features) that brings inputs to unit scale.

    Without it the residual projection of the first layer passes pixel-sized
    values straight to the classifier.
    """
    s = float(np.std(X))
    return s if s > 0 else 1.0
