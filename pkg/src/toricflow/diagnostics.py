"""Measurable counterparts of the proof machinery.

Sublevel node sets, minimal enclosing ellipsoids (Khachiyan ascent), the
sublevel-radius bound, the uniform Ricci-potential proxy, soliton
residuals on the weight-significant region, and minimizer drift
statistics.  All containment statements are made in the sampled sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def plateau_ok(series, tol=1e-3):
    """Last-half max of |series| <= first-half max + tol."""
    a = np.abs(np.asarray(series, dtype=float))
    half = len(a) // 2
    if half == 0:
        return True
    return bool(a[half:].max() <= a[:half].max() + tol)


# ---------------------------------------------------------------------------
# Sublevel sets
# ---------------------------------------------------------------------------


@dataclass
class SublevelSet:
    k: int
    points: np.ndarray
    values: np.ndarray
    empty: bool


def sublevel_points(state, k):
    """Grid nodes with m_t + k <= ubar <= m_t + k + 1 (k = 0 includes below).

    Returns the node coordinates; an empty band on a truncated grid is
    flagged rather than raised.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if state.m_t is None:
        m_t, _ = state.locate_minimum()
    else:
        m_t = state.m_t
    vals = state.ubar
    if k == 0:
        mask = vals <= m_t + 1.0
    else:
        mask = (vals >= m_t + k) & (vals <= m_t + k + 1.0)
    pts = state.points[mask]
    return SublevelSet(k=k, points=pts, values=vals[mask], empty=pts.shape[0] == 0)


# ---------------------------------------------------------------------------
# Minimal enclosing ellipsoid (Khachiyan barycentric ascent)
# ---------------------------------------------------------------------------


@dataclass
class EllipsoidReport:
    center: np.ndarray
    shape: np.ndarray          # E = {y : (y-c)^T shape (y-c) <= 1}
    R: float                   # ball radius after det-1 rounding
    points_in: int
    n_points: int
    max_form: float            # max of the quadratic form over the inputs
    iterations: int
    converged: bool
    degenerate: bool
    volume_factor: float       # vol(E) / vol(unit ball)
    john_inner_points: int     # samples inside the 1/n-scaled ellipsoid
    bound_rhs: float | None = None
    satisfied: bool | None = None


def min_enclosing_ellipsoid(points, tol=1e-7, max_iter=100_000, ridge=None):
    """(1 + tol)-approximate minimum-volume enclosing ellipsoid.

    Khachiyan's barycentric coordinate ascent on the lifted scatter
    matrix, with Wolfe-Atwood away steps (plain ascent only converges
    like 1/iterations, far too slow at tight tolerances).  Deterministic
    uniform initialization; rank-deficient inputs are regularized with a
    ridge and flagged instead of failing.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ValueError("points must be an (m, n) array")
    m, n = P.shape
    if m < 1:
        raise ValueError("need at least one point")
    scale = max(1.0, float(np.abs(P).max()))
    if ridge is None:
        ridge = (1e-7 * scale) ** 2
    degenerate = False
    centered = P - P.mean(axis=0)
    if m <= n or np.linalg.matrix_rank(centered, tol=1e-10 * scale) < n:
        degenerate = True

    d = n + 1
    Q = np.hstack([P, np.ones((m, 1))])
    u = np.full(m, 1.0 / m)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        X = Q.T @ (Q * u[:, None])
        if degenerate:
            X = X + ridge * np.eye(d)
        try:
            Xinv = np.linalg.inv(X)
        except np.linalg.LinAlgError:
            degenerate = True
            continue
        M = np.einsum("ij,jk,ik->i", Q, Xinv, Q)
        j_plus = int(np.argmax(M))
        eps_plus = M[j_plus] / d - 1.0
        support = u > 0
        Msup = np.where(support, M, np.inf)
        j_minus = int(np.argmin(Msup))
        eps_minus = 1.0 - M[j_minus] / d
        if max(eps_plus, eps_minus) <= tol:
            converged = True
            break
        if eps_plus >= eps_minus:
            j, Mj = j_plus, M[j_plus]
        else:
            j, Mj = j_minus, M[j_minus]
        beta = (Mj - d) / (d * (Mj - 1.0))
        if j == j_minus:
            beta = max(beta, -u[j] / (1.0 - u[j]))
        u *= 1.0 - beta
        u[j] += beta
        np.clip(u, 0.0, None, out=u)

    center = u @ P
    scatter = P.T @ (P * u[:, None]) - np.outer(center, center)
    if degenerate:
        scatter = scatter + ridge * np.eye(n)
    A = np.linalg.inv(scatter) / n
    A = 0.5 * (A + A.T)
    dev = P - center
    form = np.einsum("ij,jk,ik->i", dev, A, dev)
    det_A = float(np.linalg.det(A))
    R = det_A ** (-1.0 / (2 * n))
    return EllipsoidReport(
        center=center,
        shape=A,
        R=float(R),
        points_in=int(np.sum(form <= 1.0 + 1e-8)),
        n_points=m,
        max_form=float(form.max()),
        iterations=it,
        converged=converged,
        degenerate=degenerate,
        volume_factor=det_A ** -0.5,
        john_inner_points=int(np.sum(form <= 1.0 / n ** 2 + 1e-12)),
    )


# ---------------------------------------------------------------------------
# Sublevel-radius bound
# ---------------------------------------------------------------------------


@dataclass
class Bound27Report:
    R: float
    c_measured: float
    m_t: float
    rhs: float
    satisfied: bool
    empty: bool
    ellipsoid: EllipsoidReport | None = None


def measure_c(state, eps=1e-6):
    """Measured constant in det(ubar_ij) >= c e^{-ubar}: grid min of det e^{ubar}.

    Taken over the weight-significant region (the global infimum is not
    observable on a truncated grid), which keeps the check conservative.
    """
    mask = state.weight_mask(eps)
    return float((state.det[mask] * np.exp(state.ubar[mask])).min())


def check_bound_2_7(state, c_measured=None, eps=1e-6, tol=1e-7):
    """R <= sqrt(2) n (c/e)^(-1/2n) e^{m_t / 2n} on the sampled sublevel set."""
    if c_measured is None:
        c_measured = measure_c(state, eps)
    if state.m_t is None:
        m_t, _ = state.locate_minimum()
    else:
        m_t = state.m_t
    band = sublevel_points(state, 0)
    n = state.grid.dim
    if band.empty:
        return Bound27Report(R=float("nan"), c_measured=c_measured, m_t=m_t,
                             rhs=float("nan"), satisfied=False, empty=True)
    ell = min_enclosing_ellipsoid(band.points, tol=tol)
    rhs = math.sqrt(2.0) * n * (c_measured / math.e) ** (-1.0 / (2 * n)) * math.exp(
        m_t / (2 * n)
    )
    return Bound27Report(
        R=ell.R, c_measured=c_measured, m_t=m_t, rhs=rhs,
        satisfied=bool(ell.R <= rhs * (1 + 1e-9)), empty=False, ellipsoid=ell,
    )


# ---------------------------------------------------------------------------
# Uniform bound proxies over a trace
# ---------------------------------------------------------------------------


@dataclass
class PerelmanReport:
    A_measured: float
    plateau: bool
    c1: float
    c2: float
    mass_within: bool


def perelman_proxy(trace, tol=1e-3):
    """Measured sup |h_t| bound, its plateau verdict and the mass sandwich."""
    sup_h = trace.column("sup_abs_h")
    A = float(np.abs(sup_h).max())
    omega = float(trace.meta.get("omega_volume", float("nan")))
    c1, c2 = math.exp(-A) * omega, math.exp(A) * omega
    mass_dev = float(np.abs(trace.column("mass_deficit")).max())
    return PerelmanReport(
        A_measured=A,
        plateau=plateau_ok(sup_h, tol),
        c1=c1,
        c2=c2,
        mass_within=bool(c1 <= omega * (1 + mass_dev) and omega * (1 - mass_dev) <= c2),
    )


# ---------------------------------------------------------------------------
# Soliton residual
# ---------------------------------------------------------------------------


@dataclass
class SolitonResidualReport:
    osc: float
    region_fraction: float
    eps: float


def soliton_residual(state, b, eps=1e-6):
    """Oscillation of log det(ubar_ij) + <b, D ubar> + ubar where weights matter.

    Additive constants are irrelevant by construction (osc = max - min on
    the region where e^{-ubar} >= eps * max).
    """
    r = state.rhs_values(np.asarray(b, dtype=float))
    mask = state.weight_mask(eps)
    vals = r[mask]
    return SolitonResidualReport(
        osc=float(vals.max() - vals.min()),
        region_fraction=float(mask.mean()),
        eps=eps,
    )


# ---------------------------------------------------------------------------
# Drift statistics
# ---------------------------------------------------------------------------


@dataclass
class DriftReport:
    unit_times: np.ndarray
    gaps: np.ndarray
    max_gap: float
    asymptotic_velocity: np.ndarray
    velocity_error: float | None


def drift_report(trace, b=None):
    """Unit-time minimizer gaps |x_i - x_{i+1}| and the asymptotic velocity.

    The velocity is the mean of the drift estimate over the last quarter
    of the run, compared componentwise against the solved field if given.
    """
    t = trace.column("t")
    x = trace.vector_column("x_t")
    xt = trace.vector_column("Xtilde")
    t_units = np.arange(0.0, math.floor(t[-1] + 1e-9) + 0.5, 1.0)
    xs = np.stack(
        [np.interp(t_units, t, x[:, d]) for d in range(x.shape[1])], axis=-1
    )
    gaps = np.linalg.norm(np.diff(xs, axis=0), axis=-1)
    quarter = max(1, len(t) // 4)
    v = xt[-quarter:].mean(axis=0)
    err = None
    if b is not None:
        err = float(np.abs(v - np.asarray(b, dtype=float)).max())
    return DriftReport(
        unit_times=t_units,
        gaps=gaps,
        max_gap=float(gaps.max()) if gaps.size else 0.0,
        asymptotic_velocity=v,
        velocity_error=err,
    )


# ---------------------------------------------------------------------------
# Per-state bundle recorded at unit times during a run
# ---------------------------------------------------------------------------


def pushforward_mass(state, b):
    """int e^{<b, D ubar>} det(ubar_ij) dx over the interior nodes.

    By the moment-map change of variables this equals int_Omega e^{<b,y>}
    dy for every convex state, tying flow geometry to polytope quadrature.
    """
    b = np.asarray(b, dtype=float)
    inner = state.grid.interior()
    det = state.det[inner]
    if np.any(b != 0):
        det = det * np.exp(state.grad[inner] @ b)
    return float(det.sum() * state.vol_elem)


def unit_check(state, b, eps=1e-6, Z=None):
    """Small dict of per-unit-time diagnostics (stored in the trace)."""
    bound = check_bound_2_7(state, eps=eps)
    res = soliton_residual(state, b, eps=eps)
    out = {
        "t": state.t,
        "residual_osc": res.osc,
        "bound_R": bound.R,
        "bound_rhs": bound.rhs,
        "bound_c": bound.c_measured,
        "bound_satisfied": bool(bound.satisfied),
        "bound_empty": bool(bound.empty),
        "m_t": state.m_t,
    }
    if Z is not None:
        push = pushforward_mass(state, b)
        out["pushforward"] = push
        out["pushforward_rel_err"] = abs(push - Z) / Z
    if bound.ellipsoid is not None:
        out["ellipsoid_max_form"] = bound.ellipsoid.max_form
        out["john_inner_points"] = bound.ellipsoid.john_inner_points
        out["ellipsoid_converged"] = bool(bound.ellipsoid.converged)
    return out
