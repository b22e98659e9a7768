"""Normalized real Monge-Ampere flow on a truncated grid.

The evolved unknown is phi = ubar - ref, where ref is the (analytically
differentiable) initial potential, translated with the grid window in
comoving mode.  Splitting off ref keeps far-field Hessians accurate:
the exponential decay lives in closed form, while phi stays O(1) with
homogeneous Neumann boundary conditions (reflection ghosts).

Time stepping is backward Euler with damped Newton and sparse direct
solves.  An explicit scheme is unusable here: the linearized diffusion
coefficient is the inverse Hessian, which grows like exp(|x|) on the
domains of interest, so any explicit step restriction collapses to
dt ~ exp(-2L) h^2.  The implicit fixed points coincide with the discrete
stationary states, independent of dt.

After every accepted step the state is renormalized so that the grid
mass of exp(-ubar) equals the polytope volume exactly; the additive
shift is a pure gauge move absorbed into c_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import diagnostics, functionals
from .polytope import FanoPolytope, load_polytope
from .potentials import (
    AnalyticPotential,
    GridField,
    GridSpec,
    build_initial,
    det_and_inverse,
)
from .soliton import log_partition, solve_soliton_field

DRIFT_MODES = ("none", "fixed-b", "comoving")


class FlowError(RuntimeError):
    """Fatal flow failure (step rejection cascade, invalid state)."""


class DomainTooSmallError(FlowError):
    """The minimizer reached the boundary ring of the grid."""


class _StepRejected(Exception):
    pass


# ---------------------------------------------------------------------------
# Finite differences on phi with Neumann reflection ghosts
# ---------------------------------------------------------------------------


def _pad_neumann(phi):
    """Ghost ring by even reflection about the edge node (dphi/dn = 0).

    The reflection couples the edge nodes diffusively (a linear
    extrapolation ghost would zero their second difference and leave the
    reaction term undamped); window shifts restore slope compatibility
    explicitly, see _recenter.
    """
    return np.pad(phi, 1, mode="reflect")


def _phi_gradient(phi, h):
    # constant offsets are exact zeros of the stencil; subtracting the
    # mean first shrinks the roundoff carried into tiny far-field entries
    p = _pad_neumann(phi - phi.mean())
    n = phi.ndim
    if n == 1:
        g = (p[2:] - p[:-2]) / (2 * h)
        return g[..., None]
    gx = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * h)
    gy = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * h)
    return np.stack([gx, gy], axis=-1)


def _phi_hessian(phi, h):
    p = _pad_neumann(phi - phi.mean())
    n = phi.ndim
    if n == 1:
        d2 = (p[2:] - 2 * p[1:-1] + p[:-2]) / h ** 2
        return d2[..., None, None]
    c = p[1:-1, 1:-1]
    fxx = (p[2:, 1:-1] - 2 * c + p[:-2, 1:-1]) / h ** 2
    fyy = (p[1:-1, 2:] - 2 * c + p[1:-1, :-2]) / h ** 2
    fxy = (p[2:, 2:] + p[:-2, :-2] - p[2:, :-2] - p[:-2, 2:]) / (4 * h ** 2)
    H = np.empty(phi.shape + (2, 2))
    H[..., 0, 0] = fxx
    H[..., 1, 1] = fyy
    H[..., 0, 1] = fxy
    H[..., 1, 0] = fxy
    return H


def _logdet_noise_floor(phi, h, det):
    """Per-node roundoff bound on log det(H_ref + D^2 phi).

    The stored values of phi carry representation roundoff eps * |phi|;
    second differences divide it by h^2 and log det divides by the
    (exponentially small) far-field determinant.  No iteration can
    resolve a residual below this.
    """
    amp = float(np.abs(phi).max()) + 1e-30
    eps = np.finfo(float).eps
    return (8.0 * eps * amp / h ** 2) / np.maximum(det, 1e-300)


def _expand_ghost_axis(idx, coeff, n):
    """Fold one axis of ghost references by even reflection: v(-1) = v(1)."""
    folded = np.where(idx < 0, -idx, idx)
    folded = np.where(folded > n - 1, 2 * (n - 1) - folded, folded)
    return [(folded, coeff)]


# ---------------------------------------------------------------------------
# Window frame: everything fixed while the grid window stays put
# ---------------------------------------------------------------------------


class _Frame:
    """Grid window plus the reference potential evaluated on it."""

    def __init__(self, grid: GridSpec, ref: AnalyticPotential):
        self.grid = grid
        self.ref = ref
        self.points = grid.points()
        self.ref_vals = ref.value(self.points)
        self.ref_grad = ref.gradient(self.points)
        self.ref_hess = ref.hessian(self.points)
        self.h = grid.spacing
        self.vol_elem = self.h ** grid.dim


class _Geometry:
    """Derived fields of ubar = ref + phi at one phi.

    The determinant carries a resolvability floor: in far-field nodes the
    small Hessian eigenvalue sits many orders below the dominant one, and
    the correction stencil cannot track it below ~1e-8 of the dominant
    scale (Newton iterates genuinely wiggle it across zero there).  The
    floor is proportional to max|phi - mean|, so it vanishes identically
    for constant phi and exact fixtures stay bit-exact.  Convexity is
    judged against the same floor: only decisive violations count.
    """

    __slots__ = ("ubar", "grad", "hess", "det", "inv", "convex", "det_floor",
                 "det_raw_min")

    def __init__(self, frame: _Frame, phi):
        self.ubar = frame.ref_vals + phi
        self.grad = frame.ref_grad + _phi_gradient(phi, frame.h)
        self.hess = frame.ref_hess + _phi_hessian(phi, frame.h)
        det_raw, _ = det_and_inverse(self.hess)
        self.det_raw_min = float(det_raw.min())
        n = self.hess.shape[-1]
        amp = float(np.abs(phi - phi.mean()).max())
        eps = np.finfo(float).eps
        if n == 1:
            trace = self.hess[..., 0, 0]
        else:
            trace = self.hess[..., 0, 0] + self.hess[..., 1, 1]
        floor = np.abs(trace) * (
            1e-8 * np.abs(trace) * (amp > 0) + 32.0 * eps * amp / frame.h ** 2
        )
        self.det_floor = floor
        self.det = np.maximum(det_raw, floor)
        self.convex = bool(
            np.all(det_raw > -floor)
            and np.all(self.hess[..., 0, 0] > -np.sqrt(np.maximum(floor, 0.0)))
            and np.all(self.det > 0)
        )
        if n == 1:
            self.inv = np.zeros_like(self.hess)
            np.divide(1.0, self.det, out=self.inv[..., 0, 0],
                      where=self.det > 0)
        else:
            a = self.hess[..., 0, 0]
            bb = self.hess[..., 0, 1]
            c = self.hess[..., 1, 1]
            safe = np.where(self.det > 0, self.det, 1.0)
            self.inv = np.empty_like(self.hess)
            self.inv[..., 0, 0] = c / safe
            self.inv[..., 1, 1] = a / safe
            self.inv[..., 0, 1] = -bb / safe
            self.inv[..., 1, 0] = -bb / safe


# ---------------------------------------------------------------------------
# Flow state
# ---------------------------------------------------------------------------


class FlowState:
    """One time slice of the normalized flow.

    Carries the window frame, the bounded correction phi, the gauge
    constant c_t and the minimizer bookkeeping.  The derived geometry
    (moment map, Hessian, determinant) is computed lazily and cached.
    """

    def __init__(self, frame: _Frame, phi, t, c_t, base_grid=None,
                 u0_analytic=None, polytope=None):
        self._frame = frame
        self.phi = np.asarray(phi, dtype=float)
        self.t = float(t)
        self.c_t = float(c_t)
        self.base_grid = base_grid if base_grid is not None else frame.grid
        self.u0_analytic = u0_analytic if u0_analytic is not None else frame.ref
        self.polytope = polytope
        self.m_t = None
        self.x_t = None
        self.x_prime_t = None
        self.Xtilde = None
        self._geo = None

    # geometry ---------------------------------------------------------

    @property
    def grid(self):
        return self._frame.grid

    @property
    def points(self):
        return self._frame.points

    @property
    def geometry(self):
        if self._geo is None:
            self._geo = _Geometry(self._frame, self.phi)
        return self._geo

    @property
    def ubar(self):
        return self.geometry.ubar

    @property
    def grad(self):
        return self.geometry.grad

    @property
    def hess(self):
        return self.geometry.hess

    @property
    def det(self):
        return self.geometry.det

    @property
    def inv(self):
        return self.geometry.inv

    @property
    def ubar_field(self):
        return GridField(self.grid, self.ubar)

    @property
    def vol_elem(self):
        return self._frame.vol_elem

    # flow quantities ----------------------------------------------------

    def rhs_values(self, b):
        """F(ubar) = log det(ubar_ij) + <b, D ubar> + ubar (raw, unprojected)."""
        geo = self.geometry
        if not geo.convex:
            raise FlowError("state is not convex; RHS undefined")
        vals = np.log(geo.det) + geo.ubar
        b = np.asarray(b, dtype=float)
        if np.any(b != 0.0):
            vals = vals + geo.grad @ b
        return vals

    def h_values(self, b):
        """Ricci potential h_t = -du/dt + c_t = -F(ubar)."""
        return -self.rhs_values(b)

    def mass(self):
        return float(np.exp(-self.ubar).sum() * self.vol_elem)

    def lam(self, b):
        """Projection constant (1/|Omega|) int F(ubar) e^{-ubar} dx."""
        F = self.rhs_values(b)
        w = np.exp(-self.ubar)
        return float((F * w).sum() * self.vol_elem / self._omega_volume())

    def _omega_volume(self):
        if self.polytope is None:
            raise FlowError("state has no polytope attached")
        return self.polytope.volume

    def weight_mask(self, eps=1e-6):
        w = np.exp(-(self.ubar - self.ubar.min()))
        return w >= eps * w.max()

    def evaluate_ubar(self, pts):
        """Extended evaluator: analytic reference + cubic interpolation of phi.

        Outside the window phi continues affinely from the edge (the same
        extension the stencil boundary condition encodes); the reference
        is analytic anywhere.
        """
        pts = np.asarray(pts, dtype=float)
        grid = self.grid
        lo = grid.center - grid.half_width
        hi = grid.center + grid.half_width
        # beyond the window phi continues with its (zero) edge slope
        clipped = np.clip(pts, lo, hi)
        if grid.dim == 1:
            from scipy.interpolate import CubicSpline

            spl = CubicSpline(grid.axis(0), self.phi)
            phi_vals = spl(clipped[..., 0])
        else:
            from scipy.interpolate import RectBivariateSpline

            spl = RectBivariateSpline(grid.axis(0), grid.axis(1), self.phi)
            phi_vals = spl.ev(
                clipped[..., 0].ravel(), clipped[..., 1].ravel()
            ).reshape(pts.shape[:-1])
        return self._frame.ref.value(pts) + phi_vals

    def locate_minimum(self):
        """Sub-grid argmin by one quadratic fit; errors on the boundary ring."""
        return locate_minimum(self)

    def annotated(self, m_t, x_t, x_prime_t, Xtilde):
        self.m_t = float(m_t)
        self.x_t = np.asarray(x_t, dtype=float)
        self.x_prime_t = np.asarray(x_prime_t, dtype=float)
        self.Xtilde = np.asarray(Xtilde, dtype=float)
        return self


def locate_minimum(state: FlowState):
    """Grid argmin of ubar refined by a local quadratic fit (O(h^2) sub-grid)."""
    vals = state.ubar
    grid = state.grid
    n = grid.dim
    N = grid.points_per_axis
    idx = np.unravel_index(int(np.argmin(vals)), vals.shape)
    if any(i == 0 or i == N - 1 for i in idx):
        raise DomainTooSmallError(
            f"minimizer at node {idx} lies on the boundary ring; enlarge the "
            "grid or use the comoving drift mode"
        )
    h = grid.spacing
    node = np.array([grid.axis(d)[idx[d]] for d in range(n)])
    if n == 1:
        i = idx[0]
        fm, f0, fp = vals[i - 1], vals[i], vals[i + 1]
        denom = fm - 2 * f0 + fp
        off = 0.0 if denom <= 0 else 0.5 * (fm - fp) / denom
        off = float(np.clip(off, -1.0, 1.0))
        m = f0 + 0.5 * off * (fp - fm) + 0.5 * off ** 2 * denom
        return float(m), node + np.array([off * h])
    i, j = idx
    patch = vals[i - 1 : i + 2, j - 1 : j + 2]
    dx, dy = np.meshgrid((-1, 0, 1), (-1, 0, 1), indexing="ij")
    A = np.stack(
        [np.ones(9), dx.ravel(), dy.ravel(),
         0.5 * dx.ravel() ** 2, 0.5 * dy.ravel() ** 2, (dx * dy).ravel()],
        axis=1,
    )
    coef, *_ = np.linalg.lstsq(A, patch.ravel(), rcond=None)
    c0, gx, gy, hxx, hyy, hxy = coef
    H = np.array([[hxx, hxy], [hxy, hyy]])
    g = np.array([gx, gy])
    if hxx > 0 and np.linalg.det(H) > 0:
        off = -np.linalg.solve(H, g)
        off = np.clip(off, -1.0, 1.0)
        m = c0 + g @ off + 0.5 * off @ H @ off
    else:
        off = np.zeros(2)
        m = c0
    return float(m), node + off * h


# ---------------------------------------------------------------------------
# Center smoothing (modified centers x'_t and drift estimate)
# ---------------------------------------------------------------------------


class CenterTracker:
    """Exponential moving average of the minimizer with time constant tau.

    x'_t follows x_t smoothly; Xtilde is the backward difference of x'_t.
    The first sample initializes x' = x_t with Xtilde = 0.
    """

    def __init__(self, tau=1.0):
        self.tau = float(tau)
        self.x_prime = None
        self.Xtilde = None

    def update(self, dt, x_t):
        x_t = np.asarray(x_t, dtype=float)
        if self.x_prime is None or dt <= 0:
            self.x_prime = x_t.copy()
            self.Xtilde = np.zeros_like(x_t)
        else:
            alpha = 1.0 - math.exp(-dt / self.tau)
            new = self.x_prime + alpha * (x_t - self.x_prime)
            self.Xtilde = (new - self.x_prime) / dt
            self.x_prime = new
        return self.x_prime.copy(), self.Xtilde.copy()


def update_center(times, centers, tau=1.0):
    """Replay the EMA over a sampled minimizer path; returns (x', Xtilde) arrays."""
    tracker = CenterTracker(tau)
    xs, vs = [], []
    prev_t = None
    for t, x in zip(times, centers):
        dt = 0.0 if prev_t is None else t - prev_t
        xp, xt = tracker.update(dt, x)
        xs.append(xp)
        vs.append(xt)
        prev_t = t
    return np.asarray(xs), np.asarray(vs)


# ---------------------------------------------------------------------------
# Implicit step
# ---------------------------------------------------------------------------


def _assemble_jacobian(geo: _Geometry, frame: _Frame, dt, b):
    """Sparse I - dt * F'(phi) with linear-extrapolation ghost folding.

    F' delta = tr(W D^2 delta) + <b, D delta> + delta, W the inverse Hessian.
    """
    n = frame.grid.dim
    N = frame.grid.points_per_axis
    h = frame.h
    W = geo.inv
    b = np.asarray(b, dtype=float)
    rows, cols, vals = [], [], []
    if n == 1:
        size = N
        i = np.arange(N)
        diag = 1.0 - dt * (-2.0 * W[:, 0, 0] / h ** 2 + 1.0)
        rows.append(i); cols.append(i); vals.append(diag)
        for off in (-1, 1):
            coeff = -dt * (W[:, 0, 0] / h ** 2 + off * b[0] / (2 * h))
            for idx, c in _expand_ghost_axis(i + off, coeff, N):
                rows.append(i); cols.append(idx); vals.append(c)
        rows = np.concatenate(rows); cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.csc_matrix((vals, (rows, cols)), shape=(size, size))
    size = N * N
    ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    ii = ii.ravel(); jj = jj.ravel()
    row = ii * N + jj
    W00 = W[..., 0, 0].ravel()
    W11 = W[..., 1, 1].ravel()
    W01 = W[..., 0, 1].ravel()

    def add(di, dj, coeff):
        for i2, c2 in _expand_ghost_axis(ii + di, coeff, N):
            for j2, c3 in _expand_ghost_axis(jj + dj, c2, N):
                rows.append(row); cols.append(i2 * N + j2); vals.append(c3)

    add(0, 0, 1.0 - dt * (-2.0 * (W00 + W11) / h ** 2 + 1.0))
    for s in (-1, 1):
        add(s, 0, -dt * (W00 / h ** 2 + s * b[0] / (2 * h)))
        add(0, s, -dt * (W11 / h ** 2 + s * b[1] / (2 * h)))
    for si in (-1, 1):
        for sj in (-1, 1):
            add(si, sj, -dt * (si * sj * W01 / (2 * h ** 2)))
    rows = np.concatenate(rows); cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csc_matrix((vals, (rows, cols)), shape=(size, size))


class _Stepper:
    """Backward Euler with damped Newton; caches the sparse factorization."""

    def __init__(self, newton_tol=1e-11, max_newton=14):
        self.newton_tol = newton_tol
        self.max_newton = max_newton
        self._lu = None
        self._lu_dt = None

    def invalidate(self):
        self._lu = None

    def _factor(self, geo, frame, dt, b):
        self._lu = spla.splu(_assemble_jacobian(geo, frame, dt, b))
        self._lu_dt = dt

    def solve(self, frame, phi_old, geo_old, lam_old, dt, b):
        """One backward Euler solve; raises _StepRejected on failure.

        Convergence is judged on the Newton increment (plus a noise-floor
        test on the residual): the raw residual at far-field nodes is
        limited by the roundoff of log det against exponentially small
        determinants, while the corresponding Jacobian diagonal is huge,
        so those residual entries carry no solution error.
        """
        phi = phi_old
        geo = geo_old
        refreshed = self._lu is None or self._lu_dt != dt
        if refreshed:
            self._factor(geo, frame, dt, b)
        delta_prev = None
        for it in range(self.max_newton):
            F = np.log(geo.det) + geo.ubar
            if np.any(np.asarray(b) != 0.0):
                F = F + geo.grad @ np.asarray(b, dtype=float)
            G = phi - phi_old - dt * (F - lam_old)
            if not np.all(np.isfinite(G)):
                raise _StepRejected("non-finite Newton residual")
            scale = 1.0 + float(np.abs(phi).max())
            floor = dt * _logdet_noise_floor(phi, frame.h, geo.det)
            if float((np.abs(G) - floor).max()) <= self.newton_tol * scale:
                return phi, geo, it
            delta = -self._lu.solve(G.ravel()).reshape(phi.shape)
            dnorm = float(np.abs(delta).max())
            step = 1.0
            for _ in range(25):
                phi_try = phi + step * delta
                geo_try = _Geometry(frame, phi_try)
                if geo_try.convex:
                    break
                step *= 0.5
            else:
                raise _StepRejected("convexity loss along Newton line search")
            phi, geo = phi_try, geo_try
            if step < 1.0:
                self._factor(geo, frame, dt, b)
                refreshed = True
            elif step * dnorm <= self.newton_tol * scale:
                return phi, geo, it + 1
            elif delta_prev is not None and dnorm > 0.5 * delta_prev and not refreshed:
                self._factor(geo, frame, dt, b)
                refreshed = True
            delta_prev = dnorm
        raise _StepRejected("Newton stalled within iteration cap")


# ---------------------------------------------------------------------------
# Configuration and trace
# ---------------------------------------------------------------------------

TRACE_SCALARS = [
    "t", "dt", "c_t", "m_t", "sup_abs_h", "lambda", "mass_deficit",
    "mu_tilde", "dmu_dt", "I", "J_tilde", "F_tilde", "residual_osc",
    "min_det", "max_moment_violation",
]


def trace_columns(dim):
    cols = ["t", "dt", "c_t", "m_t"]
    cols += [f"x_t_{d + 1}" for d in range(dim)]
    cols += [f"x_prime_t_{d + 1}" for d in range(dim)]
    cols += [f"Xtilde_{d + 1}" for d in range(dim)]
    cols += ["sup_abs_h", "lambda", "mass_deficit", "mu_tilde", "dmu_dt",
             "I", "J_tilde", "F_tilde", "residual_osc", "min_det",
             "max_moment_violation"]
    return cols


@dataclass
class FlowConfig:
    """Run configuration; `validate` enforces the documented invariants."""

    polytope: FanoPolytope | str
    t_end: float
    weights: list | None = None
    perturbation: dict | None = None
    vertex_only: bool = False
    gauge_shift: float = 0.0
    half_width: float | None = None
    points: int | None = None
    drift_mode: str = "none"
    cfl: float = 0.2
    record_every: float = 0.25
    snapshot_every: float | None = None
    stop_residual_osc: float | None = None
    newton_tol: float = 1e-11
    dt_init: float = 1e-3
    dt_growth: float = 1.3
    max_halvings: int = 10
    residual_eps: float = 1e-6
    recenter_threshold: float = 2.0
    tau: float = 1.0
    b_override: list | None = None
    functional_slices: int = 16

    def resolve_polytope(self):
        if isinstance(self.polytope, FanoPolytope):
            return self.polytope
        return load_polytope(self.polytope)

    def grid_for(self, polytope):
        # 2-d default: the correction stencil resolves determinants down
        # to ~e^-16 of the dominant scale, so the box must stay inside
        # that horizon (gap-1 reflexive fixtures decay like e^-L along
        # the worst directions); the corner-direction truncation e^-14
        # is far below every reported tolerance.
        L = self.half_width
        if L is None:
            L = 25.0 if polytope.dim == 1 else 14.0
        N = self.points
        if N is None:
            N = 512 if polytope.dim == 1 else 128
        return GridSpec(polytope.dim, np.zeros(polytope.dim), L, N)

    def validate(self):
        if not (0.0 < self.cfl <= 0.5):
            raise ValueError("cfl must lie in (0, 0.5]")
        if self.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if self.drift_mode not in DRIFT_MODES:
            raise ValueError(f"drift_mode must be one of {DRIFT_MODES}")
        if self.record_every <= 0:
            raise ValueError("record_every must be positive")
        if self.points is not None and self.points < 16:
            raise ValueError("grid too coarse: points must be >= 16")
        if self.half_width is not None and self.half_width <= 0:
            raise ValueError("half_width must be positive")
        return self


@dataclass
class FlowTrace:
    """Time series of scalar observables plus run metadata."""

    columns: dict
    meta: dict
    unit_checks: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    final_state: FlowState | None = None

    def column(self, name):
        return np.asarray(self.columns[name])

    @property
    def dim(self):
        return int(self.meta["dim"])

    def vector_column(self, base):
        return np.stack(
            [self.column(f"{base}_{d + 1}") for d in range(self.dim)], axis=-1
        )

    def to_csv(self, path):
        names = trace_columns(self.dim)
        arrays = [np.asarray(self.columns[c], dtype=float) for c in names]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(names) + "\n")
            for row in zip(*arrays):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, meta=None):
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header:
                raise ValueError("trace CSV is empty")
            names = header.split(",")
            rows = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != len(names):
                    raise ValueError(
                        f"trace CSV line {lineno}: expected {len(names)} fields, "
                        f"got {len(parts)}"
                    )
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as exc:
                    raise ValueError(f"trace CSV line {lineno}: {exc}") from exc
        if not rows:
            raise ValueError("trace CSV has no data rows")
        data = np.asarray(rows)
        columns = {name: data[:, k] for k, name in enumerate(names)}
        dim = sum(1 for name in names if name.startswith("x_t_"))
        meta = dict(meta or {})
        meta.setdefault("dim", dim)
        return cls(columns=columns, meta=meta)


# ---------------------------------------------------------------------------
# Public single-step operations
# ---------------------------------------------------------------------------


def rhs(state: FlowState, b=None):
    """The flow right-hand side F(ubar) as a GridField (before projection)."""
    if b is None:
        b = np.zeros(state.grid.dim)
    return GridField(state.grid, state.rhs_values(b))


def project_step(state: FlowState, dt, b=None, newton_tol=1e-11, max_halvings=10):
    """Advance the projected flow by dt (backward Euler + exact renormalization).

    Returns a new FlowState at t + dt with grid mass exp(-ubar) equal to
    the polytope volume; the renormalization shift is absorbed into c_t.
    Halves dt internally on step rejection (up to ``max_halvings``), then
    raises FlowError.
    """
    if b is None:
        b = np.zeros(state.grid.dim)
    b = np.asarray(b, dtype=float)
    if dt == 0.0:
        new = FlowState(state._frame, state.phi.copy(), state.t, state.c_t,
                        state.base_grid, state.u0_analytic, state.polytope)
        return new
    stepper = _Stepper(newton_tol=newton_tol)
    omega = state.polytope.volume
    remaining = float(dt)
    sub_dt = float(dt)
    phi, geo, c, t = state.phi, state.geometry, state.c_t, state.t
    frame = state._frame
    halvings = 0
    while remaining > 1e-15 * max(1.0, abs(dt)):
        sub_dt = min(sub_dt, remaining)
        lam_old = _lam_of(geo, b, frame, omega)
        try:
            phi_new, geo_new, _ = stepper.solve(frame, phi, geo, lam_old, sub_dt, b)
        except _StepRejected as exc:
            halvings += 1
            stepper.invalidate()
            if halvings > max_halvings:
                raise FlowError(f"step rejected after {max_halvings} halvings: {exc}")
            sub_dt *= 0.5
            continue
        phi_new, geo_new, c = _renormalize(
            frame, phi_new, geo_new, c, sub_dt, lam_old, b, omega
        )
        phi, geo = phi_new, geo_new
        t += sub_dt
        remaining -= sub_dt
    new = FlowState(frame, phi, t, c, state.base_grid, state.u0_analytic,
                    state.polytope)
    new._geo = geo
    return new


def _lam_of(geo, b, frame, omega):
    F = np.log(geo.det) + geo.ubar
    if np.any(b != 0.0):
        F = F + geo.grad @ b
    w = np.exp(-geo.ubar)
    return float((F * w).sum() * frame.vol_elem / omega)


def _renormalize(frame, phi, geo, c, dt, lam_old, b, omega):
    """Exact mass projection plus trapezoidal update of c (dc/dt = c + lambda)."""
    mass = float(np.exp(-geo.ubar).sum() * frame.vol_elem)
    s = math.log(mass / omega)
    if s != 0.0:
        phi = phi + s
        geo = _Geometry(frame, phi)
    lam_new = _lam_of(geo, b, frame, omega)
    edt = math.exp(dt)
    c_new = edt * c + 0.5 * dt * (edt * lam_old + lam_new) - s
    return phi, geo, c_new


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def initial_state(config: FlowConfig, polytope=None, grid=None):
    """Build the t = 0 state: phi = -c_0, mass exactly |Omega|.

    The numerics always evolve the min-0 representative of u0: an
    additive shift delta of the initial potential moves the raw solution
    by exactly delta e^t, a closed-form gauge mode, so `gauge_shift` is
    factored out here and restored analytically in the reported c_t.
    """
    P = polytope if polytope is not None else config.resolve_polytope()
    if grid is None:
        grid = config.grid_for(P)
    pot = build_initial(
        P, weights=config.weights, perturbation=config.perturbation,
        grid=grid, vertex_only=config.vertex_only, gauge_shift=0.0,
    )
    frame = _Frame(grid, pot.u0_analytic)
    mass_u0 = float(np.exp(-frame.ref_vals).sum() * frame.vol_elem)
    c0 = math.log(P.volume) - math.log(mass_u0)
    phi0 = np.full(grid.shape, -c0)
    state = FlowState(frame, phi0, 0.0, c0, grid, pot.u0_analytic, P)
    if not state.geometry.convex:
        raise FlowError("initial state is not convex on the grid")
    return state, pot


def _axis_shift(arr, k, axis):
    """Shift values by k nodes along an axis; exposed entries copy the edge."""
    if k == 0:
        return arr
    N = arr.shape[axis]
    return np.take(arr, np.clip(np.arange(N) + k, 0, N - 1), axis=axis)


def _taper_edge_slopes(phi, h, width):
    """Add strip corrections so one-sided edge slopes vanish on every face.

    Rebasing against the translated reference leaves phi with O(e^-L)
    normal slopes at the window faces, incompatible with the reflection
    ghosts: the resulting one-node curvature kink would exceed the
    exponentially small far-field Hessian.  A quadratic taper spreads the
    slope removal over `width` nodes, keeping the added curvature a small
    fraction of the local scale.
    """
    n = phi.ndim
    N = phi.shape[0]
    k = int(min(width, N // 3))
    prof = np.zeros(N)
    i = np.arange(k + 1)
    prof[: k + 1] = h * (k - i) ** 2 / (2.0 * k)
    out = phi
    for axis in range(n):
        lo_slope = (np.take(out, 1, axis=axis) - np.take(out, 0, axis=axis)) / h
        hi_slope = (
            np.take(out, N - 1, axis=axis) - np.take(out, N - 2, axis=axis)
        ) / h
        shape = [1] * n
        shape[axis] = N
        p_lo = prof.reshape(shape)
        p_hi = prof[::-1].reshape(shape)
        if n == 1:
            out = out + lo_slope * p_lo + hi_slope * p_hi
        else:
            expand = [slice(None)] * n
            expand[axis] = None
            out = out + lo_slope[tuple(expand)] * p_lo \
                      + hi_slope[tuple(expand)] * p_hi
    return out


def _recenter(state: FlowState, threshold_nodes=2.0):
    """Shift the window by integer node multiples toward x_t (comoving mode)."""
    grid = state.grid
    h = grid.spacing
    offset = state.x_t - grid.center
    if np.all(np.abs(offset) <= threshold_nodes * h):
        return state, False
    shift_nodes = np.rint(offset / h).astype(int)
    shift = shift_nodes * h
    new_grid = grid.shifted(shift)
    u0 = state.u0_analytic
    base_center = state.base_grid.center
    new_offset = new_grid.center - base_center
    new_ref = u0.translated(new_offset)
    phi_shifted = state.phi
    for d in range(grid.dim):
        phi_shifted = _axis_shift(phi_shifted, int(shift_nodes[d]), d)
    new_frame = _Frame(new_grid, new_ref)
    old_ref_on_new = state._frame.ref.value(new_frame.points)
    phi_new = phi_shifted + old_ref_on_new - new_frame.ref_vals
    width = 8 * int(np.abs(shift_nodes).max()) + 8
    phi_new = _taper_edge_slopes(phi_new, h, width)
    new_state = FlowState(new_frame, phi_new, state.t, state.c_t,
                          state.base_grid, state.u0_analytic, state.polytope)
    if not new_state.geometry.convex:
        raise FlowError("recentring produced a nonconvex state")
    if state.m_t is not None:
        new_state.annotated(state.m_t, state.x_t, state.x_prime_t, state.Xtilde)
    return new_state, True


def discrete_soliton(config: FlowConfig, b=None, tol=1e-13, max_iter=40):
    """Newton-polished stationary state of the discrete drifted flow.

    Solves F(ubar) = const with grid mass |Omega|; this is the discrete
    realization of the closed-form soliton profile (distance O(h^2)).
    """
    config.validate()
    P = config.resolve_polytope()
    state, _ = initial_state(config, P)
    if b is None:
        b = np.zeros(P.dim)
    b = np.asarray(b, dtype=float)
    frame = state._frame
    omega = P.volume
    phi = state.phi
    geo = state.geometry
    for _ in range(max_iter):
        lam = _lam_of(geo, b, frame, omega)
        F = np.log(geo.det) + geo.ubar
        if np.any(b != 0.0):
            F = F + geo.grad @ b
        res = F - lam
        if float(np.abs(res).max()) <= tol * max(1.0, float(np.abs(F).max())):
            break
        # _assemble_jacobian(dt=1) builds I - F', so F' = I - that
        F_prime = sp.identity(res.size, format="csc") - _assemble_jacobian(
            geo, frame, 1.0, b
        )
        delta = spla.splu(F_prime.tocsc()).solve(-res.ravel()).reshape(phi.shape)
        step = 1.0
        for _ in range(30):
            phi_try = phi + step * delta
            geo_try = _Geometry(frame, phi_try)
            if geo_try.convex:
                break
            step *= 0.5
        else:
            raise FlowError("discrete soliton Newton lost convexity")
        phi, geo = phi_try, geo_try
        mass = float(np.exp(-geo.ubar).sum() * frame.vol_elem)
        s = math.log(mass / omega)
        phi = phi + s
        geo = _Geometry(frame, phi)
    else:
        raise FlowError("discrete soliton iteration did not converge")
    mass = float(np.exp(-geo.ubar).sum() * frame.vol_elem)
    s = math.log(mass / omega)
    phi = phi + s
    out = FlowState(frame, phi, 0.0, state.c_t - s, state.base_grid,
                    state.u0_analytic, P)
    return out


def run_flow(config: FlowConfig):
    """Evolve the configured flow and collect the full observable trace."""
    config.validate()
    P = config.resolve_polytope()

    if config.b_override is not None:
        b_sol = np.asarray(config.b_override, dtype=float)
    else:
        b_sol = solve_soliton_field(P).b
    b_flow = b_sol if config.drift_mode == "fixed-b" else np.zeros(P.dim)
    Z_b = log_partition(P, b_sol)[0]

    state, pot = initial_state(config, P)
    omega = P.volume
    tracker = CenterTracker(config.tau)
    accum = functionals.EnergyAccumulator()
    stepper = _Stepper(newton_tol=config.newton_tol)

    dim = P.dim
    cols = {name: [] for name in trace_columns(dim)}
    unit_checks = []
    snapshots = []

    def bookkeeping(state, dt):
        m, x = locate_minimum(state)
        xp, xt = tracker.update(dt, x)
        state.annotated(m, x, xp, xt)
        return state

    gauge = float(config.gauge_shift)

    def record_row(state, dt, lam, mass_deficit, dirich):
        en = functionals.energy_report(state, b_sol, accum,
                                       slices=config.functional_slices)
        res = diagnostics.soliton_residual(state, b_sol, eps=config.residual_eps)
        viol = P.containment_violation(state.grad).max()
        h_vals = state.h_values(b_flow)[state.weight_mask(config.residual_eps)]
        cols["t"].append(state.t)
        cols["dt"].append(dt)
        cols["c_t"].append(state.c_t + gauge * math.exp(state.t))
        cols["m_t"].append(state.m_t)
        for d in range(dim):
            cols[f"x_t_{d + 1}"].append(state.x_t[d])
            cols[f"x_prime_t_{d + 1}"].append(state.x_prime_t[d])
            cols[f"Xtilde_{d + 1}"].append(state.Xtilde[d])
        cols["sup_abs_h"].append(float(np.abs(h_vals).max()))
        cols["lambda"].append(lam)
        cols["mass_deficit"].append(mass_deficit)
        cols["mu_tilde"].append(en.mu_tilde)
        cols["dmu_dt"].append(en.dmu_dt)
        cols["I"].append(en.I)
        cols["J_tilde"].append(en.J_tilde)
        cols["F_tilde"].append(en.F_tilde)
        cols["residual_osc"].append(res.osc)
        cols["min_det"].append(state.geometry.det_raw_min)
        cols["max_moment_violation"].append(float(viol))
        return res.osc

    state = bookkeeping(state, 0.0)
    lam0 = state.lam(b_flow)
    dirich0 = functionals.dirichlet_energy(state, b_sol)
    accum.update(0.0, dirich0)
    osc = record_row(state, 0.0, lam0, 0.0, dirich0)
    if config.snapshot_every is not None:
        snapshots.append(_snapshot(state))
    unit_checks.append(diagnostics.unit_check(state, b_sol, Z=Z_b))

    eps_t = 1e-9
    next_record = config.record_every
    next_unit = 1.0
    next_snap = config.snapshot_every
    dt = min(config.dt_init, config.cfl)
    lam = lam0
    stop = state.t >= config.t_end - eps_t
    halvings = 0
    while not stop:
        target = min(
            x for x in (next_record, next_unit, config.t_end,
                        next_snap if next_snap is not None else np.inf)
        )
        dt_step = min(dt, max(target - state.t, 1e-12))
        try:
            phi_new, geo_new, _ = stepper.solve(
                state._frame, state.phi, state.geometry, lam, dt_step, b_flow
            )
        except _StepRejected as exc:
            halvings += 1
            stepper.invalidate()
            if halvings > config.max_halvings:
                raise FlowError(
                    f"step at t={state.t:.4f} rejected after "
                    f"{config.max_halvings} halvings: {exc}"
                )
            dt = dt_step * 0.5
            continue
        halvings = 0
        phi_new, geo_new, c_new = _renormalize(
            state._frame, phi_new, geo_new, state.c_t, dt_step,
            lam, b_flow, omega
        )
        mass = float(np.exp(-geo_new.ubar).sum() * state.vol_elem)
        mass_deficit = abs(mass / omega - 1.0)
        new_state = FlowState(state._frame, phi_new, state.t + dt_step, c_new,
                              state.base_grid, state.u0_analytic, P)
        new_state._geo = geo_new
        new_state = bookkeeping(new_state, dt_step)
        state = new_state
        lam = state.lam(b_flow)
        dirich = functionals.dirichlet_energy(state, b_sol)
        accum.update(state.t, dirich)

        if state.t >= next_record - eps_t or state.t >= config.t_end - eps_t:
            osc = record_row(state, dt_step, lam, mass_deficit, dirich)
            while next_record <= state.t + eps_t:
                next_record += config.record_every
        if state.t >= next_unit - eps_t:
            unit_checks.append(diagnostics.unit_check(state, b_sol, Z=Z_b))
            while next_unit <= state.t + eps_t:
                next_unit += 1.0
        if next_snap is not None and state.t >= next_snap - eps_t:
            snapshots.append(_snapshot(state))
            while next_snap <= state.t + eps_t:
                next_snap += config.snapshot_every

        if config.drift_mode == "comoving":
            state, moved = _recenter(state, config.recenter_threshold)
            if moved:
                stepper.invalidate()
                lam = state.lam(b_flow)

        if state.t >= config.t_end - eps_t:
            stop = True
        elif (config.stop_residual_osc is not None
              and osc is not None and osc <= config.stop_residual_osc):
            stop = True
        dt = min(dt * config.dt_growth, config.cfl)

    meta = {
        "dim": dim,
        "polytope": P.name,
        "omega_volume": omega,
        "diameter": P.diameter,
        "b": b_sol.tolist(),
        "b_flow": b_flow.tolist(),
        "c0": cols["c_t"][0],
        "drift_mode": config.drift_mode,
        "grid": state.grid.to_json(),
        "t_end": config.t_end,
        "kappa_tail_bound": accum.tail_bound(),
        "kappa_discounted": -accum.discounted,
        "mu_h0": functionals.h_moment(state, b_sol),
    }
    return FlowTrace(
        columns={k: np.asarray(v) for k, v in cols.items()},
        meta=meta,
        unit_checks=unit_checks,
        snapshots=snapshots,
        final_state=state,
    )


def _snapshot(state: FlowState):
    return {
        "t": state.t,
        "field": state.ubar_field,
        "c_t": state.c_t,
        "m_t": state.m_t,
        "x_t": state.x_t.tolist(),
    }
