"""Reference potentials, initial data and discrete operators on truncated grids.

The smooth reference potential is the log-sum-exp over the lattice points
of the moment polytope; its support cone is the max over vertices.  Both
are available in closed form (value / gradient / Hessian), which the flow
solver uses to keep far-field Hessians accurate where finite differences
of the raw potential would cancel catastrophically.

Discrete operators use second-order central stencils on the interior;
returned arrays are full grid shape with the boundary ring replicated
from the adjacent interior node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .polytope import FanoPolytope


class ConvexityError(ValueError):
    """Discrete Hessian failed to be positive definite at a node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


# ---------------------------------------------------------------------------
# Grid containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on a box center + [-L, L]^n."""

    dim: int
    center: np.ndarray
    half_width: float
    points_per_axis: int

    def __post_init__(self):
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=float).reshape(self.dim)
        )
        self.center.setflags(write=False)
        if self.points_per_axis < 16:
            raise ValueError("grid too coarse: points_per_axis must be >= 16")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

    @property
    def spacing(self):
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self):
        return (self.points_per_axis,) * self.dim

    def axis(self, d):
        return self.center[d] + np.linspace(
            -self.half_width, self.half_width, self.points_per_axis
        )

    def points(self):
        """Node coordinates, shape grid_shape + (dim,)."""
        axes = [self.axis(d) for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def shifted(self, offset):
        return GridSpec(
            self.dim, self.center + np.asarray(offset, float), self.half_width,
            self.points_per_axis,
        )

    def interior(self):
        """Slicer selecting the interior (one-node margin)."""
        return (slice(1, -1),) * self.dim

    def to_json(self):
        return {
            "dim": self.dim,
            "center": self.center.tolist(),
            "half_width": self.half_width,
            "points_per_axis": self.points_per_axis,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            int(data["dim"]), np.asarray(data["center"], float),
            float(data["half_width"]), int(data["points_per_axis"]),
        )


@dataclass(frozen=True)
class GridField:
    """A scalar sampled on a GridSpec."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.spec.shape:
            raise ValueError(f"values shape {vals.shape} != grid shape {self.spec.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    def with_values(self, values):
        return GridField(self.spec, values)

    def to_csv(self, path):
        """Write `x1[,x2],value` rows in row-major node order."""
        pts = self.spec.points().reshape(-1, self.spec.dim)
        vals = self.values.reshape(-1)
        cols = [f"x{d + 1}" for d in range(self.spec.dim)] + ["value"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for p, v in zip(pts, vals):
                fh.write(",".join(f"{c:.17g}" for c in p) + f",{v:.17g}\n")

    @classmethod
    def from_csv(cls, path, spec):
        raw = np.genfromtxt(path, delimiter=",", skip_header=1)
        vals = raw[:, -1].reshape(spec.shape)
        return cls(spec, vals)


# ---------------------------------------------------------------------------
# Analytic potentials (closed-form value / gradient / Hessian)
# ---------------------------------------------------------------------------


class AnalyticPotential:
    """Base for potentials with closed-form derivatives, vectorized over points."""

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def translated(self, offset):
        return _Translated(self, np.asarray(offset, dtype=float))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = _Constant(float(other), dim=None)
        return _Sum([self, other])

    def sample(self, spec):
        return GridField(spec, self.value(spec.points()))


class LogSumExpPotential(AnalyticPotential):
    """log sum_k w_k exp(<q_k, x>) with positive weights, evaluated stably."""

    def __init__(self, points, weights=None):
        self.points = np.asarray(points, dtype=float)
        m = self.points.shape[0]
        self.weights = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
        if self.weights.shape != (m,) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per summand")
        self._logw = np.log(self.weights)

    def _scores(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.points.T + self._logw

    def value(self, x):
        a = self._scores(x)
        m = a.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]

    def _softmax(self, x):
        a = self._scores(x)
        a -= a.max(axis=-1, keepdims=True)
        p = np.exp(a)
        p /= p.sum(axis=-1, keepdims=True)
        return p

    def gradient(self, x):
        return self._softmax(x) @ self.points

    def hessian(self, x):
        # centered covariance: sum_k p_k (q_k - g)(q_k - g)^T; the
        # uncentered form cancels catastrophically in the far field
        p = self._softmax(x)
        g = p @ self.points
        d = self.points - g[..., None, :]
        return np.einsum("...k,...ki,...kj->...ij", p, d, d)


class GaussianBump(AnalyticPotential):
    """amplitude * exp(-|x - center|^2 / width^2)."""

    def __init__(self, amplitude, center, width=1.0):
        self.amplitude = float(amplitude)
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = float(width)
        if self.width <= 0:
            raise ValueError("bump width must be positive")

    def _d(self, x):
        return np.asarray(x, dtype=float) - self.center

    def value(self, x):
        d = self._d(x)
        return self.amplitude * np.exp(-(d ** 2).sum(axis=-1) / self.width ** 2)

    def gradient(self, x):
        d = self._d(x)
        return self.value(x)[..., None] * (-2.0 * d / self.width ** 2)

    def hessian(self, x):
        d = self._d(x)
        v = self.value(x)
        n = d.shape[-1]
        eye = np.eye(n)
        outer = d[..., :, None] * d[..., None, :]
        return v[..., None, None] * (
            4.0 * outer / self.width ** 4 - 2.0 * eye / self.width ** 2
        )


class _Constant(AnalyticPotential):
    def __init__(self, c, dim):
        self.c = float(c)
        self.dim = dim

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.c)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        return np.zeros(x.shape[:-1] + (n, n))


class _Sum(AnalyticPotential):
    def __init__(self, terms):
        self.terms = []
        for t in terms:
            if isinstance(t, _Sum):
                self.terms.extend(t.terms)
            else:
                self.terms.append(t)

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def gradient(self, x):
        return sum(t.gradient(x) for t in self.terms)

    def hessian(self, x):
        return sum(t.hessian(x) for t in self.terms)


class _Translated(AnalyticPotential):
    """base evaluated at x - offset."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = offset

    def value(self, x):
        return self.base.value(np.asarray(x, float) - self.offset)

    def gradient(self, x):
        return self.base.gradient(np.asarray(x, float) - self.offset)

    def hessian(self, x):
        return self.base.hessian(np.asarray(x, float) - self.offset)


# ---------------------------------------------------------------------------
# Reference potential and support cone
# ---------------------------------------------------------------------------


def default_reference_points(polytope: FanoPolytope):
    """Summation points making log det(v0_ij) + v0 bounded on both sides.

    For reflexive polytopes (every facet at lattice distance 1) the full
    lattice-point set works: along each vertex ray the nearest summand
    sits at gap equal to the support slope.  For a non-reflexive interval
    the interior points decay too slowly against the steep vertex, so the
    admissible set is vertices plus the origin.
    """
    if polytope.fano or polytope.dim > 1:
        return polytope.lattice_points
    pts = {tuple(v) for v in polytope.vertices}
    pts.add((0.0,) * polytope.dim)
    return np.asarray(sorted(pts), dtype=float)


def make_reference(polytope: FanoPolytope, weights=None, vertex_only=False,
                   points=None):
    """The log-sum-exp reference as an AnalyticPotential.

    By default the sum runs over the polytope's admissible summation
    points (all lattice points in the reflexive case); the vertex-only
    variant (whose Hessian degenerates in the far field for e.g. the
    interval) stays available behind the flag.
    """
    if points is not None:
        pts = np.asarray(points, dtype=float)
    elif vertex_only:
        pts = polytope.vertices
    else:
        pts = default_reference_points(polytope)
    return LogSumExpPotential(pts, weights)


def reference_potential(polytope, weights, x, vertex_only=False):
    """Pointwise evaluation of the reference potential (stable for any x)."""
    return float(make_reference(polytope, weights, vertex_only).value(np.asarray(x, float)))


def support_cone(polytope, x):
    """Support cone max_k <p^(k), x>: positively 1-homogeneous, exact."""
    return polytope.support(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------


def _pad_edge(arr, dim):
    pad = [(1, 1)] * dim + [(0, 0)] * (arr.ndim - dim)
    return np.pad(arr, pad, mode="edge")


def moment_map(f: GridField):
    """Central-difference gradient, shape grid + (dim,), ring replicated."""
    v = f.values
    h = f.spec.spacing
    n = f.spec.dim
    grads = []
    inner = f.spec.interior()
    for d in range(n):
        up = tuple(
            slice(2, None) if k == d else slice(1, -1) for k in range(n)
        )
        dn = tuple(
            slice(0, -2) if k == d else slice(1, -1) for k in range(n)
        )
        grads.append((v[up] - v[dn]) / (2.0 * h))
    g = np.stack(grads, axis=-1)
    out = _pad_edge(g, n)
    assert out.shape == f.spec.shape + (n,)
    return out


def _hessian_arrays(values, h, dim):
    v = values
    if dim == 1:
        d2 = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
        return d2[..., None, None]
    if dim == 2:
        c = v[1:-1, 1:-1]
        fxx = (v[2:, 1:-1] - 2 * c + v[:-2, 1:-1]) / h ** 2
        fyy = (v[1:-1, 2:] - 2 * c + v[1:-1, :-2]) / h ** 2
        fxy = (v[2:, 2:] + v[:-2, :-2] - v[2:, :-2] - v[:-2, 2:]) / (4.0 * h ** 2)
        H = np.empty(fxx.shape + (2, 2))
        H[..., 0, 0] = fxx
        H[..., 1, 1] = fyy
        H[..., 0, 1] = fxy
        H[..., 1, 0] = fxy
        return H
    raise ValueError("hessian supports dim <= 2 only")


def det_and_inverse(H):
    """Determinant and inverse of a field of 1x1 or 2x2 symmetric matrices."""
    n = H.shape[-1]
    if n == 1:
        det = H[..., 0, 0]
        inv = np.zeros_like(H)
        np.divide(1.0, H[..., 0, 0], out=inv[..., 0, 0], where=det > 0)
        return det, inv
    a, b, c = H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]
    det = a * c - b * b
    inv = np.empty_like(H)
    safe = np.where(det > 0, det, 1.0)
    inv[..., 0, 0] = c / safe
    inv[..., 1, 1] = a / safe
    inv[..., 0, 1] = -b / safe
    inv[..., 1, 0] = -b / safe
    return det, inv


def is_positive_definite(H):
    """Sylvester test for 1x1/2x2 symmetric matrix fields."""
    if H.shape[-1] == 1:
        return H[..., 0, 0] > 0
    det = H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] ** 2
    return (H[..., 0, 0] > 0) & (det > 0)


def fd_noise_scale(f: GridField):
    """Roundoff bound on second differences of the sampled values.

    Determinant entries below this are unresolvable for the stencil: the
    stored values carry eps * max|f| of representation noise which the
    second difference divides by h^2.
    """
    eps = np.finfo(float).eps
    amp = float(np.abs(f.values).max()) + 1.0
    return 12.0 * eps * amp / f.spec.spacing ** 2


def det_resolution(H, h, noise):
    """Per-node resolution limit of the finite-difference determinant.

    Combines stencil roundoff with, in 2-d, the truncation cancellation of
    fxx fyy - fxy^2 along nearly degenerate directions, where each factor
    carries an O(h^2) error against an exponentially small true product.
    """
    n = H.shape[-1]
    tol = noise ** n
    if n == 2:
        trace = np.abs(H[..., 0, 0]) + np.abs(H[..., 1, 1])
        tol = tol + 2.0 * h ** 2 * trace ** 2
    return tol


def hessian_det(f: GridField, check=True):
    """Discrete Hessian, determinant and inverse of a sampled field.

    Central second differences; mixed terms by the centered cross stencil.
    With ``check`` (default) a determinant decisively below zero (beyond
    what the stencil can resolve) at an interior node raises
    ConvexityError naming the node.
    """
    n = f.spec.dim
    H_int = _hessian_arrays(f.values, f.spec.spacing, n)
    det_int, inv_int = det_and_inverse(H_int)
    tol = det_resolution(H_int, f.spec.spacing, fd_noise_scale(f))
    if check and np.any(det_int <= -tol):
        node = np.unravel_index(int(np.argmin(det_int + tol)), det_int.shape)
        node_full = tuple(int(i) + 1 for i in node)
        raise ConvexityError(
            f"nonpositive Hessian determinant at interior node {node_full} "
            f"(det={det_int[node]:.3e})",
            node=node_full,
        )
    H = _pad_edge(H_int, n)
    det = _pad_edge(det_int, n)
    inv = _pad_edge(inv_int, n)
    return H, det, inv


# ---------------------------------------------------------------------------
# Initial data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialSet:
    """Reference potential, support cone and initial potential on a grid."""

    polytope: FanoPolytope
    grid: GridSpec
    weights: np.ndarray
    v0: GridField
    vbar: GridField
    u0: GridField
    v0_analytic: AnalyticPotential = field(repr=False)
    u0_analytic: AnalyticPotential = field(repr=False)
    ref_points: np.ndarray = None
    min_shift: float = 0.0
    min_node: tuple = ()
    vertex_only: bool = False

    def sandwich_margins(self):
        """Worst slack of vbar + log(min vertex weight) <= v0 <= vbar + log(sum w).

        Both numbers are >= 0 (up to roundoff) for a valid set.
        """
        keys = [tuple(np.rint(q).astype(int)) for q in self.ref_points]
        wmap = dict(zip(keys, self.weights))
        wv = min(wmap[tuple(np.rint(v).astype(int))] for v in self.polytope.vertices)
        low = self.v0.values - (self.vbar.values + np.log(wv))
        high = (self.vbar.values + np.log(self.weights.sum())) - self.v0.values
        return float(low.min()), float(high.min())

    def moment_image_violation(self):
        """Max facet violation of the discrete moment image of u0 (interior)."""
        g = moment_map(self.u0)[self.grid.interior()]
        return float(self.polytope.containment_violation(g).max())


def _parse_perturbation(perturbation, dim):
    if perturbation is None:
        return None
    if isinstance(perturbation, AnalyticPotential):
        return perturbation
    if isinstance(perturbation, dict):
        kind = perturbation.get("kind", "bump")
        if kind != "bump":
            raise ValueError(f"unknown perturbation kind {kind!r}")
        return GaussianBump(
            perturbation.get("amplitude", 0.0),
            perturbation.get("center", np.zeros(dim)),
            perturbation.get("width", 1.0),
        )
    raise ValueError("perturbation must be None, a dict or an AnalyticPotential")


def build_initial(polytope, weights=None, perturbation=None, grid=None,
                  vertex_only=False, gauge_shift=0.0, reference_points=None):
    """Assemble the initial potential u0 = reference + perturbation, min-shifted.

    The minimum over the grid is shifted to ``gauge_shift`` (0 by default,
    matching the inf u0 = u0(o) = 0 normalization); convexity of the
    discrete Hessian is verified and a destructive perturbation is
    rejected with the offending node.
    """
    if grid is None:
        raise ValueError("grid spec is required")
    if grid.dim != polytope.dim:
        raise ValueError("grid dimension does not match polytope dimension")
    if reference_points is not None:
        base_pts = np.asarray(reference_points, dtype=float)
    elif vertex_only:
        base_pts = polytope.vertices
    else:
        base_pts = default_reference_points(polytope)
    m = base_pts.shape[0]
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    v0_analytic = make_reference(polytope, w, points=base_pts)
    v0 = v0_analytic.sample(grid)
    vbar = GridField(grid, polytope.support(grid.points()))

    bump = _parse_perturbation(perturbation, polytope.dim)
    raw = v0_analytic if bump is None else v0_analytic + bump
    raw_field = raw.sample(grid)
    shift = float(raw_field.values.min()) - float(gauge_shift)
    min_node = np.unravel_index(int(np.argmin(raw_field.values)), grid.shape)

    u0_analytic = raw + (-shift)
    u0 = GridField(grid, raw_field.values - shift)
    try:
        hessian_det(u0, check=True)
    except ConvexityError as exc:
        raise ConvexityError(
            f"perturbation destroys convexity: {exc}", node=exc.node
        ) from exc
    return PotentialSet(
        polytope=polytope, grid=grid, weights=w, v0=v0, vbar=vbar, u0=u0,
        v0_analytic=v0_analytic, u0_analytic=u0_analytic, ref_points=base_pts,
        min_shift=shift, min_node=min_node, vertex_only=vertex_only,
    )


@dataclass(frozen=True)
class AsymptoticsReport:
    sup_cone_gap: float
    argmax_node: tuple
    logdet_plus_v0_min: float
    logdet_plus_v0_max: float


def asymptotics_report(pot: PotentialSet):
    """Grid sup of |vbar - v0| and the interior range of log det(v0_ij) + v0.

    The range is taken over interior nodes whose determinant the stencil
    can resolve (the far field of a steep reference drops below the
    roundoff of second differences).  A decisively nonconvex interior
    node raises ConvexityError with its location.
    """
    gap = np.abs(pot.vbar.values - pot.v0.values)
    argmax = np.unravel_index(int(np.argmax(gap)), pot.grid.shape)
    H, det, _ = hessian_det(pot.v0, check=True)
    inner = pot.grid.interior()
    det_in = det[inner]
    tol = det_resolution(H[inner], pot.grid.spacing, fd_noise_scale(pot.v0))
    resolvable = det_in > tol
    comb = np.log(det_in[resolvable]) + pot.v0.values[inner][resolvable]
    return AsymptoticsReport(
        sup_cone_gap=float(gap.max()),
        argmax_node=argmax,
        logdet_plus_v0_min=float(comb.min()),
        logdet_plus_v0_max=float(comb.max()),
    )


def theta_field(b, u: GridField):
    """<b, Du> sampled on the grid of u (drift Hamiltonian of the field b)."""
    g = moment_map(u)
    return u.with_values(g @ np.asarray(b, dtype=float))
