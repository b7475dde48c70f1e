"""Delaunay edge extraction for landmark point sets.

Triangulation itself is delegated to Qhull through :mod:`scipy.spatial`; this
module adds the input validation and the edge bookkeeping the graph builder
needs.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, QhullError


class DegenerateInputError(ValueError):
    """Raised for point sets that have no well-defined triangulation."""


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) array of points, got shape {pts.shape}")
    if len(pts) < 3:
        raise DegenerateInputError(f"need at least 3 points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise DegenerateInputError("points contain non-finite coordinates")
    uniq = np.unique(pts, axis=0)
    if len(uniq) != len(pts):
        raise DegenerateInputError(f"{len(pts) - len(uniq)} duplicate point(s) in input")
    # exact collinearity test: every cross product against the first edge vanishes
    d = pts[1:] - pts[0]
    cross = d[:, 0] * d[0, 1] - d[:, 1] * d[0, 0]
    if np.all(cross == 0.0):
        raise DegenerateInputError("all points are collinear")
    return pts


def delaunay_triangles(points) -> np.ndarray:
    """Return the triangles as an ``(m, 3)`` array of point indices."""
    pts = _check_points(points)
    try:
        tri = Delaunay(pts)
    except QhullError as exc:  # pragma: no cover - guarded by _check_points
        raise DegenerateInputError(str(exc)) from exc
    return np.asarray(tri.simplices, dtype=np.int64)


def delaunay_triangulate(points) -> list[tuple[int, int]]:
    """Unique undirected edges of the Delaunay triangulation.

    Each edge is reported once as ``(i, j)`` with ``i < j``; the list is sorted.
    """
    simplices = delaunay_triangles(points)
    edges = set()
    for a, b, c in simplices.tolist():
        for i, j in ((a, b), (b, c), (a, c)):
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)
