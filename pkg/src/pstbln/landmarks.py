"""Landmark sequences, the spatial edge graph, and edge-feature tensors.

Frames are ``(P, 2)`` float arrays of pixel coordinates with ``P`` either 68
(the full annotation scheme) or 51 (jaw line removed).  A sequence stacks its
frames into a ``(T, P, 2)`` array.  Edge-feature tensors are plain arrays of
shape ``(F, T, E)`` with ``F = 2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .delaunay import delaunay_triangulate

FULL_POINTS = 68
INFORMATIVE_POINTS = 51
JAW_POINTS = 17
# nose tip: landmark 30 of the 68-point scheme
NOSE_FULL = 30
NOSE_INDEX = NOSE_FULL - JAW_POINTS


@dataclass
class LandmarkSequence:
    frames: np.ndarray
    label: int
    sequence_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 2:
            raise ValueError(f"frames must have shape (T, P, 2), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")
        if frames.shape[1] not in (FULL_POINTS, INFORMATIVE_POINTS):
            raise ValueError(
                f"frames must carry {FULL_POINTS} or {INFORMATIVE_POINTS} points, "
                f"got {frames.shape[1]}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValueError("landmark coordinates must be finite")
        self.frames = frames
        self.label = int(self.label)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_points(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames) -> "LandmarkSequence":
        return LandmarkSequence(frames, self.label, self.sequence_id)


@dataclass(frozen=True)
class GraphTopology:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    master_index: int
    _edge_array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        object.__setattr__(self, "edges", edges)
        if not 0 <= self.master_index < self.node_count:
            raise ValueError(
                f"master_index {self.master_index} out of range for {self.node_count} nodes"
            )
        seen = set()
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i}, {j}) references a missing node")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        for j in range(self.node_count):
            if j != self.master_index and (min(j, self.master_index), max(j, self.master_index)) not in seen:
                raise ValueError(f"master node is not connected to node {j}")
        arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "_edge_array", arr)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def edge_array(self) -> np.ndarray:
        return self._edge_array

    def degree(self, node: int) -> int:
        return int(np.sum(self._edge_array == node))

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "master_index": self.master_index,
            "edges": [list(e) for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GraphTopology":
        return cls(int(d["node_count"]), tuple(tuple(e) for e in d["edges"]), int(d["master_index"]))

    @classmethod
    def from_json(cls, text: str) -> "GraphTopology":
        return cls.from_dict(json.loads(text))


def select_frames(sequence: LandmarkSequence, mode: str = "peak4", n: int | None = None) -> LandmarkSequence:
    """Pick the frames fed to the network.

    ``peak4`` keeps the first (neutral) frame and the last three (apex) frames.
    ``uniform`` samples ``n`` frames at equal intervals, falling back to cyclic
    tiling when the sequence is shorter than ``n``.
    """
    T = sequence.num_frames
    if mode == "peak4":
        if T < 4:
            raise ValueError(f"peak4 selection needs at least 4 frames, got {T}")
        idx = [0, T - 3, T - 2, T - 1]
    elif mode == "uniform":
        if n is None or n < 1:
            raise ValueError("uniform selection needs a positive frame count")
        if T < n:
            idx = [i % T for i in range(n)]
        else:
            idx = np.floor(np.arange(n) * (T / n)).astype(int).tolist()
    else:
        raise ValueError(f"unknown frame selection mode {mode!r}")
    return sequence.with_frames(sequence.frames[idx])


def extract_informative(frame) -> np.ndarray:
    """Drop the 17 jaw-line landmarks of a 68-point frame."""
    pts = np.asarray(frame, dtype=np.float64)
    if pts.shape != (FULL_POINTS, 2):
        raise ValueError(f"expected a ({FULL_POINTS}, 2) frame, got {pts.shape}")
    return pts[JAW_POINTS:].copy()


def normalize_frame(frame, master_index: int = NOSE_INDEX) -> np.ndarray:
    pts = np.asarray(frame, dtype=np.float64)
    if not 0 <= master_index < len(pts):
        raise ValueError(f"master_index {master_index} out of range for {len(pts)} points")
    return pts - pts[master_index]


def prepare_sequence(sequence: LandmarkSequence, master_index: int = NOSE_INDEX) -> LandmarkSequence:
    """68 -> 51 point reduction (when needed) followed by per-frame nose centering."""
    frames = sequence.frames
    if frames.shape[1] == FULL_POINTS:
        frames = frames[:, JAW_POINTS:]
    return sequence.with_frames(frames - frames[:, master_index : master_index + 1])


def build_topology(reference_frame, master_index: int = NOSE_INDEX) -> GraphTopology:
    """Delaunay edges of ``reference_frame`` plus a star around the master node.

    Delaunay edges are oriented low -> high index, master edges master -> other.
    An edge produced by both keeps the master orientation.  The result is sorted.
    """
    pts = np.asarray(reference_frame, dtype=np.float64)
    n = len(pts)
    if not 0 <= master_index < n:
        raise ValueError(f"master_index {master_index} out of range for {n} points")
    edges = {}
    for i, j in delaunay_triangulate(pts):
        edges[(i, j)] = (i, j)
    for j in range(n):
        if j != master_index:
            edges[(min(j, master_index), max(j, master_index))] = (master_index, j)
    return GraphTopology(n, tuple(sorted(edges.values())), master_index)


def canonical_frame(sequences) -> np.ndarray:
    """Mean nose-centred 51-point frame over a collection of sequences."""
    seqs = list(sequences)
    if not seqs:
        raise ValueError("no sequences to average")
    means = [prepare_sequence(s).frames.mean(axis=0) for s in seqs]
    return np.mean(means, axis=0)


def edge_features(frame, topology: GraphTopology) -> np.ndarray:
    """``(2, E)`` array of source-minus-target displacements."""
    pts = np.asarray(frame, dtype=np.float64)
    if pts.shape != (topology.node_count, 2):
        raise ValueError(
            f"frame has shape {pts.shape}, topology expects ({topology.node_count}, 2)"
        )
    e = topology.edge_array
    return (pts[e[:, 0]] - pts[e[:, 1]]).T


def sequence_to_tensor(sequence: LandmarkSequence, topology: GraphTopology) -> np.ndarray:
    """Stack per-frame edge features into an ``(F=2, T, E)`` tensor."""
    frames = sequence.frames
    if frames.shape[1:] != (topology.node_count, 2):
        raise ValueError(
            f"sequence frames have {frames.shape[1]} points, topology expects {topology.node_count}"
        )
    e = topology.edge_array
    diff = frames[:, e[:, 0]] - frames[:, e[:, 1]]  # T x E x 2
    return np.ascontiguousarray(diff.transpose(2, 0, 1))
