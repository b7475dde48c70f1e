"""Slow, obviously-correct reference implementations used only by the tests."""

from fractions import Fraction
from itertools import combinations

import numpy as np


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _incircle(a, b, c, d):
    """> 0 iff d is strictly inside the circumcircle of counter-clockwise (a, b, c)."""
    rows = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        rows.append((dx, dy, dx * dx + dy * dy))
    (a1, a2, a3), (b1, b2, b3), (c1, c2, c3) = rows
    return a1 * (b2 * c3 - b3 * c2) - a2 * (b1 * c3 - b3 * c1) + a3 * (b1 * c2 - b2 * c1)


def brute_force_delaunay_triangles(points):
    """All triangles whose circumcircle has no input point strictly inside (exact rationals)."""
    pts = [(Fraction(float(x)), Fraction(float(y))) for x, y in points]
    out = []
    for i, j, k in combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        o = _orient(a, b, c)
        if o == 0:
            continue
        if o < 0:
            b, c = c, b
        if all(_incircle(a, b, c, pts[m]) <= 0 for m in range(len(pts)) if m not in (i, j, k)):
            out.append((i, j, k))
    return out


def brute_force_delaunay_edges(points):
    edges = set()
    for i, j, k in brute_force_delaunay_triangles(points):
        edges.update({(i, j), (i, k), (j, k)})
    return sorted(edges)


def circumcircle_is_empty(points, tri) -> bool:
    pts = [(Fraction(float(x)), Fraction(float(y))) for x, y in points]
    i, j, k = tri
    a, b, c = pts[i], pts[j], pts[k]
    if _orient(a, b, c) < 0:
        b, c = c, b
    return all(_incircle(a, b, c, pts[m]) <= 0 for m in range(len(pts)) if m not in (i, j, k))


def naive_bilinear(H, U, W, relu=True):
    F_in, T, E = H.shape
    F_out = W.shape[0]
    E_out = U.shape[0]
    out = np.zeros((F_out, T, E_out))
    for o in range(F_out):
        for t in range(T):
            for e2 in range(E_out):
                acc = 0.0
                for e in range(E):
                    for i in range(F_in):
                        acc += U[e2, e] * W[o, i] * H[i, t, e]
                out[o, t, e2] = max(acc, 0.0) if relu else acc
    return out


def naive_temporal_conv(H, kernel, bias):
    F_in, T, E = H.shape
    F_out, _, K, _ = kernel.shape
    pad = (K - 1) // 2
    out = np.zeros((F_out, T, E))
    for o in range(F_out):
        for t in range(T):
            for e in range(E):
                acc = bias[o]
                for i in range(F_in):
                    for k in range(K):
                        src = t + k - pad
                        if 0 <= src < T:
                            acc += kernel[o, i, k, 0] * H[i, src, e]
                out[o, t, e] = acc
    return out


def naive_global_avg_pool(H):
    F, T, E = H.shape
    out = np.zeros(F)
    for f in range(F):
        acc = 0.0
        for t in range(T):
            for e in range(E):
                acc += H[f, t, e]
        out[f] = acc / (T * E)
    return out


def naive_linear(x, weight, bias):
    C, F = weight.shape
    out = np.zeros(C)
    for c in range(C):
        acc = bias[c]
        for f in range(F):
            acc += weight[c, f] * x[f]
        out[c] = acc
    return out


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def tabulated_param_count(f_in, widths, k, edge_count, classes):
    """Parameter count tallied tensor by tensor from the layer shape rules."""
    total = 0
    g = f_in
    for f in widths:
        tensors = [
            (edge_count, edge_count),  # U
            (f, g), (f,),              # channel map + bias
            (f, f, k, 1), (f,),        # temporal kernel + bias
            (f,), (f,), (f,), (f,),    # two batch norms (gamma, beta)
            (f, g), (f,),              # residual 1
            (f, f), (f,),              # residual 2
        ]
        total += sum(int(np.prod(s)) for s in tensors)
        g = f
    return total + classes * g + classes
