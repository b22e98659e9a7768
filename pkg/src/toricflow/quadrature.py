"""Symmetric simplex quadrature (Grundmann-Moller family).

A rule of index ``s`` integrates polynomials of total degree ``2s + 1``
exactly on a simplex in any dimension.  Nodes are barycentric, weights
alternate in sign; both are generated deterministically, so repeated
evaluations are bit-reproducible.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


def _compositions(total, parts):
    """All tuples of `parts` nonnegative ints summing to `total`, lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


@lru_cache(maxsize=None)
def simplex_rule(dim, order):
    """Barycentric nodes and weights for the Grundmann-Moller rule.

    Parameters
    ----------
    dim : int
        Simplex dimension n.
    order : int
        Rule index s >= 0; the rule is exact for degree 2s + 1.

    Returns
    -------
    (nodes, weights)
        ``nodes`` has shape (m, dim + 1) in barycentric coordinates,
        ``weights`` shape (m,).  Weights sum to 1, i.e. they are
        normalized against the simplex volume.
    """
    if dim < 1:
        raise ValueError("simplex dimension must be >= 1")
    if order < 0:
        raise ValueError("rule index must be >= 0")
    s = order
    d = 2 * s + 1
    n = dim
    nodes = []
    weights = []
    for i in range(s + 1):
        denom = d + n - 2 * i
        coeff = (
            (-1.0) ** i
            * 2.0 ** (-2 * s)
            * float(denom) ** d
            / (math.factorial(i) * math.factorial(d + n - i))
        )
        for beta in _compositions(s - i, n + 1):
            bary = [(2 * b + 1) / denom for b in beta]
            nodes.append(bary)
            weights.append(coeff)
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    # The raw formula integrates over the unit simplex of volume 1/n!;
    # rescale so weights sum to 1 (caller multiplies by actual volume).
    weights *= math.factorial(n)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def simplex_volume(vertices):
    """Volume of the simplex spanned by ``vertices`` ((n+1) x n array)."""
    v = np.asarray(vertices, dtype=float)
    edges = v[1:] - v[0]
    n = v.shape[1]
    return abs(np.linalg.det(edges)) / math.factorial(n)


# The signed weights of the family grow roughly five-fold per index, so
# large indices lose accuracy to cancellation.  Orders beyond this cap
# refine by uniform subdivision instead, which keeps the conditioning
# flat while the truncation error keeps shrinking.
GM_INDEX_CAP = 10
_SUBDIV_CAP = 4


def rule_decomposition(order):
    """(rule index, subdivision level) realizing the requested order."""
    if order < 1:
        raise ValueError("order must be >= 1")
    index = min(order, GM_INDEX_CAP)
    level = min(max(order - GM_INDEX_CAP, 0), _SUBDIV_CAP)
    return index, level


def _subdivide(vertices):
    """Uniform refinement: 2 children in 1-d, 4 self-similar in 2-d."""
    v = np.asarray(vertices, dtype=float)
    n = v.shape[1]
    if n == 1:
        mid = 0.5 * (v[0] + v[1])
        return [np.array([v[0], mid]), np.array([mid, v[1]])]
    if n == 2:
        m01 = 0.5 * (v[0] + v[1])
        m02 = 0.5 * (v[0] + v[2])
        m12 = 0.5 * (v[1] + v[2])
        return [
            np.array([v[0], m01, m02]),
            np.array([m01, v[1], m12]),
            np.array([m02, m12, v[2]]),
            np.array([m01, m12, m02]),
        ]
    raise ValueError("subdivision supports dim <= 2 only")


def _descend(vertices, level):
    if level == 0:
        yield vertices
        return
    for child in _subdivide(vertices):
        yield from _descend(child, level - 1)


def quadrature_points(vertices, order):
    """All (points, weights*volume) pairs for one simplex at a given order."""
    v = np.asarray(vertices, dtype=float)
    n = v.shape[1]
    index, level = rule_decomposition(order)
    nodes, weights = simplex_rule(n, index)
    pts, wts = [], []
    for child in _descend(v, level):
        pts.append(nodes @ child)
        wts.append(weights * simplex_volume(child))
    return np.concatenate(pts), np.concatenate(wts)


def integrate_simplex(f, vertices, order):
    """Integrate ``f`` over one simplex (GM rule, subdivided for high orders).

    ``f`` maps an (m, n) array of points to an (m,) array of values.
    Exact for polynomials of degree 2 * min(order, GM_INDEX_CAP) + 1.
    """
    points, weights = quadrature_points(vertices, order)
    values = np.asarray(f(points), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("integrand returned non-finite values on quadrature nodes")
    return float(weights @ values)
