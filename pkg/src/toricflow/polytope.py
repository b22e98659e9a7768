"""Moment polytopes of toric Fano fixtures: geometry, membership, quadrature.

A polytope is held in both representations (vertex hull and facet
halfspaces) and validated against itself on construction.  Integration
uses a fan triangulation from the barycenter with symmetric simplex
rules, so every integral is deterministic for a fixed order.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .quadrature import integrate_simplex, simplex_volume

_HULL_TOL = 1e-12


class PolytopeError(ValueError):
    """Malformed or inconsistent polytope data."""


def _as_points(rows, dim, what):
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise PolytopeError(f"{what} must be a list of {dim}-vectors")
    if not np.all(np.isfinite(arr)):
        raise PolytopeError(f"{what} contain non-finite entries")
    return arr


def _hull_order_2d(vertices):
    """Vertices of the 2-d hull in counterclockwise order (monotone chain)."""
    pts = sorted(map(tuple, vertices))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise PolytopeError("vertices are not full-dimensional (collinear in 2-d)")
    return np.asarray(hull, dtype=float)


def _primitive(vec):
    """Divide an integer vector by the gcd of its entries (cosmetic only)."""
    ints = np.rint(vec)
    if np.max(np.abs(vec - ints)) > 1e-9:
        return vec
    g = 0
    for v in ints:
        g = math.gcd(g, int(abs(v)))
    return ints / g if g > 1 else ints


def _facets_from_vertices(vertices, dim):
    if dim == 1:
        lo, hi = float(vertices.min()), float(vertices.max())
        if hi - lo <= 0:
            raise PolytopeError("vertices are not full-dimensional (single point)")
        return np.array([[1.0], [-1.0]]), np.array([hi, -lo])
    if dim == 2:
        hull = _hull_order_2d(vertices)
        normals, offsets = [], []
        for i in range(len(hull)):
            a, b = hull[i], hull[(i + 1) % len(hull)]
            edge = b - a
            n = np.array([edge[1], -edge[0]])  # outward for CCW ordering
            n = _primitive(n)
            normals.append(n)
            offsets.append(float(n @ a))
        return np.asarray(normals, dtype=float), np.asarray(offsets, dtype=float)
    raise PolytopeError("facets must be given explicitly for dim >= 3")


@dataclass(frozen=True)
class FanoPolytope:
    """Bounded convex lattice polytope containing the origin in its interior."""

    name: str
    dim: int
    vertices: np.ndarray
    lattice_points: np.ndarray
    facet_normals: np.ndarray
    facet_offsets: np.ndarray
    fano: bool = True
    volume: float = field(init=False)
    barycenter: np.ndarray = field(init=False)
    diameter: float = field(init=False)

    def __post_init__(self):
        for arr in (self.vertices, self.lattice_points, self.facet_normals,
                    self.facet_offsets):
            arr.setflags(write=False)
        vol, bary = self._volume_and_barycenter()
        object.__setattr__(self, "volume", vol)
        object.__setattr__(self, "barycenter", bary)
        diffs = self.vertices[:, None, :] - self.vertices[None, :, :]
        object.__setattr__(
            self, "diameter", float(np.sqrt((diffs ** 2).sum(axis=2)).max())
        )
        self._validate()

    # -- construction -------------------------------------------------

    @classmethod
    def from_data(cls, data):
        """Build from a plain mapping (the polytope document schema)."""
        try:
            name = str(data["name"])
            dim = int(data["dim"])
            vertices = data["vertices"]
        except (KeyError, TypeError) as exc:
            raise PolytopeError(f"polytope document missing field: {exc}") from exc
        if dim not in (1, 2, 3):
            raise PolytopeError(f"dim must be 1, 2 or 3, got {dim}")
        vertices = _as_points(vertices, dim, "vertices")
        if "facets" in data and data["facets"]:
            normals = _as_points([f["normal"] for f in data["facets"]], dim, "facet normals")
            offsets = np.asarray([float(f["offset"]) for f in data["facets"]])
        else:
            normals, offsets = _facets_from_vertices(vertices, dim)
        if "lattice_points" in data and data["lattice_points"]:
            lattice = _as_points(data["lattice_points"], dim, "lattice_points")
        else:
            lattice = _enumerate_lattice(vertices, normals, offsets)
        return cls(
            name=name,
            dim=dim,
            vertices=vertices,
            lattice_points=lattice,
            facet_normals=normals,
            facet_offsets=offsets,
            fano=bool(data.get("fano", True)),
        )

    # -- validation ----------------------------------------------------

    def _validate(self):
        if self.vertices.shape[0] < self.dim + 1:
            raise PolytopeError("too few vertices for a full-dimensional polytope")
        if self.volume <= 0:
            raise PolytopeError("vertices are not full-dimensional (zero volume)")
        # origin strictly interior: every facet offset positive
        margins = self.facet_offsets
        if np.any(margins <= _HULL_TOL):
            k = int(np.argmin(margins))
            raise PolytopeError(
                "origin is not interior: halfspace "
                f"<{self.facet_normals[k].tolist()}, y> <= {self.facet_offsets[k]} "
                "is violated or tight at 0"
            )
        # hull/halfspace duality on the data we were given
        slack = self.facet_normals @ self.vertices.T - self.facet_offsets[:, None]
        if slack.max() > 1e-9:
            raise PolytopeError("a vertex violates a facet halfspace")
        if np.abs(slack.max(axis=1)).max() > 1e-9:
            raise PolytopeError("a facet is not supported by any vertex")
        # every vertex is a lattice point of the polytope
        for v in self.vertices:
            if np.max(np.abs(v - np.rint(v))) > 1e-9:
                raise PolytopeError(f"vertex {v.tolist()} is not a lattice point")
        for q in self.lattice_points:
            if not self.contains(q, tol=1e-12):
                raise PolytopeError(f"lattice point {q.tolist()} lies outside the polytope")

    # -- geometry ------------------------------------------------------

    def _fan_simplices(self):
        """Simplices of the barycentric fan triangulation, deterministic order."""
        if self.dim == 1:
            lo, hi = float(self.vertices.min()), float(self.vertices.max())
            mid = (lo + hi) / 2.0
            return [np.array([[lo], [mid]]), np.array([[mid], [hi]])]
        if self.dim == 2:
            hull = _hull_order_2d(self.vertices)
            center = hull.mean(axis=0)
            return [
                np.vstack([center, hull[i], hull[(i + 1) % len(hull)]])
                for i in range(len(hull))
            ]
        raise PolytopeError("quadrature supports dim <= 2 only")

    def _volume_and_barycenter(self):
        if self.dim == 3:
            from scipy.spatial import Delaunay

            tri = Delaunay(self.vertices)
            simplices = [self.vertices[idx] for idx in np.sort(tri.simplices, axis=1)]
        else:
            simplices = self._fan_simplices()
        vol = 0.0
        weighted = np.zeros(self.dim)
        for simplex in simplices:
            v = simplex_volume(simplex)
            vol += v
            weighted += v * simplex.mean(axis=0)
        if vol <= 0:
            raise PolytopeError("vertices are not full-dimensional (zero volume)")
        return float(vol), weighted / vol

    def contains(self, y, tol=0.0):
        """True iff <l, y> <= c + tol for every facet (l, c)."""
        if tol < 0:
            raise ValueError("tol must be >= 0")
        y = np.asarray(y, dtype=float).reshape(self.dim)
        return bool(np.all(self.facet_normals @ y <= self.facet_offsets + tol))

    def containment_violation(self, points):
        """Max facet violation max_k (<l_k, y> - c_k) over an array of points.

        ``points`` has shape (..., dim); negative result means strictly inside.
        """
        pts = np.asarray(points, dtype=float)
        slack = pts @ self.facet_normals.T - self.facet_offsets
        return slack.max(axis=-1)

    def integrate(self, f, order=12):
        """Integral of ``f`` over the polytope by fan triangulation.

        ``f`` maps (m, dim) arrays of points to (m,) values; scalars are
        broadcast.  Exact for polynomials of degree 2*order + 1.
        """
        if order < 1:
            raise ValueError("order must be >= 1")

        def fv(points):
            vals = f(points)
            return np.broadcast_to(np.asarray(vals, dtype=float), (points.shape[0],))

        return float(sum(integrate_simplex(fv, s, order) for s in self._fan_simplices()))

    def support(self, x):
        """Support function max_k <p_k, x> over the vertices (vectorized)."""
        x = np.asarray(x, dtype=float)
        return (x @ self.vertices.T).max(axis=-1)

    def geometry_summary(self):
        return self.volume, self.barycenter.copy(), self.diameter

    def to_document(self):
        return {
            "name": self.name,
            "dim": self.dim,
            "vertices": self.vertices.tolist(),
            "lattice_points": self.lattice_points.tolist(),
            "facets": [
                {"normal": n.tolist(), "offset": float(c)}
                for n, c in zip(self.facet_normals, self.facet_offsets)
            ],
            "fano": self.fano,
        }


def _enumerate_lattice(vertices, normals, offsets):
    lo = np.floor(vertices.min(axis=0)).astype(int)
    hi = np.ceil(vertices.max(axis=0)).astype(int)
    points = []
    for idx in itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi))):
        y = np.asarray(idx, dtype=float)
        if np.all(normals @ y <= offsets + 1e-9):
            points.append(y)
    return np.asarray(points, dtype=float)


def load_polytope(source):
    """Load a polytope from a JSON document path, JSON text, or mapping."""
    if isinstance(source, dict):
        return FanoPolytope.from_data(source)
    text = None
    if hasattr(source, "read"):
        text = source.read()
    else:
        s = str(source)
        if s.lstrip().startswith("{"):
            text = s
        else:
            if s in FIXTURES:
                return fixture(s)
            try:
                with open(s, "r", encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise PolytopeError(f"cannot read polytope document {s!r}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolytopeError(f"malformed polytope document: {exc}") from exc
    return FanoPolytope.from_data(data)


# ---------------------------------------------------------------------------
# Built-in fixtures: the smooth toric del Pezzo polygons in dim <= 2 plus an
# asymmetric interval with nonzero drift.  Seg is not the polytope of a
# smooth Fano and is flagged accordingly.
# ---------------------------------------------------------------------------

FIXTURES = {
    "P1": {"name": "P1", "dim": 1, "vertices": [[-1], [1]]},
    "Seg": {"name": "Seg", "dim": 1, "vertices": [[-1], [2]], "fano": False},
    "P2": {"name": "P2", "dim": 2, "vertices": [[2, -1], [-1, 2], [-1, -1]]},
    "P1xP1": {
        "name": "P1xP1",
        "dim": 2,
        "vertices": [[1, 1], [-1, 1], [-1, -1], [1, -1]],
    },
    "Bl1P2": {
        "name": "Bl1P2",
        "dim": 2,
        "vertices": [[2, -1], [-1, 2], [-1, 0], [0, -1]],
    },
    "Bl2P2": {
        "name": "Bl2P2",
        "dim": 2,
        "vertices": [[-1, 2], [-1, 0], [0, -1], [1, -1], [1, 0]],
    },
    "Bl3P2": {
        "name": "Bl3P2",
        "dim": 2,
        "vertices": [[1, 0], [0, 1], [-1, 1], [-1, 0], [0, -1], [1, -1]],
    },
}


def fixture(name):
    """Instantiate a built-in fixture polytope by name."""
    try:
        return FanoPolytope.from_data(FIXTURES[name])
    except KeyError:
        raise PolytopeError(
            f"unknown fixture {name!r}; available: {', '.join(sorted(FIXTURES))}"
        ) from None
