"""Drift vector field of the soliton: the zero of the weighted barycenter.

The coefficient vector b is the unique minimizer of the strictly convex
log-partition integral Z(b) = int_Omega exp(<b, y>) dy; its gradient is
the weighted barycenter whose vanishing characterizes the soliton field.
Solved by damped Newton from b = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polytope import FanoPolytope
from .potentials import theta_field  # noqa: F401  (re-export: theta lives with Du)
from .quadrature import quadrature_points


class SolitonSolveError(RuntimeError):
    """Newton failed to converge within the iteration cap."""


@dataclass(frozen=True)
class SolitonField:
    b: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        self.b.setflags(write=False)


def log_partition(polytope: FanoPolytope, b, order=12):
    """Z(b), grad Z and hess Z by fan-triangulated simplex quadrature.

    Z = int exp(<b,y>) dy, grad = int y exp(<b,y>) dy,
    hess = int y y^T exp(<b,y>) dy (symmetric positive definite).
    """
    b = np.asarray(b, dtype=float).reshape(polytope.dim)
    n = polytope.dim
    Z = 0.0
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    for simplex in polytope._fan_simplices():
        pts, wts = quadrature_points(simplex, order)
        e = np.exp(pts @ b) * wts
        Z += e.sum()
        grad += e @ pts
        hess += np.einsum("k,ki,kj->ij", e, pts, pts)
    return float(Z), grad, hess


def solve_soliton_field(polytope: FanoPolytope, tol=1e-10, order=12, max_iter=60):
    """Damped Newton for the zero of grad Z (minimizer of Z), from b = 0.

    Convergence criterion is |grad Z| / Z <= tol.  Backtracking uses the
    Armijo condition with factor 1e-4 on Z itself; Z decreases strictly
    along the accepted iterates.
    """
    b = np.zeros(polytope.dim)
    Z, grad, hess = log_partition(polytope, b, order)
    for it in range(max_iter):
        res = float(np.linalg.norm(grad)) / Z
        if res <= tol:
            return SolitonField(b=b, residual_norm=float(np.linalg.norm(grad)),
                                iterations=it, converged=True)
        step = -np.linalg.solve(hess, grad)
        if res <= 1e-6:
            # quadratic basin: the Armijo test is blind below the
            # quadrature roundoff in Z, plain Newton is safe here
            b = b + step
            Z, grad, hess = log_partition(polytope, b, order)
            continue
        t = 1.0
        descent = float(grad @ step)  # negative for a Newton step on convex Z
        accepted = False
        for _ in range(50):
            b_try = b + t * step
            Z_try, grad_try, hess_try = log_partition(polytope, b_try, order)
            if Z_try <= Z + 1e-4 * t * descent:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise SolitonSolveError(
                f"line search failed at iteration {it}: b={b.tolist()}, Z={Z:.6e}, "
                f"|grad|={np.linalg.norm(grad):.3e}"
            )
        b, Z, grad, hess = b_try, Z_try, grad_try, hess_try
    raise SolitonSolveError(
        f"no convergence within {max_iter} iterations; last |grad|/Z = "
        f"{np.linalg.norm(grad) / Z:.3e}"
    )


def theta_range(polytope: FanoPolytope, b):
    """Range [min_Omega <b,y>, max_Omega <b,y>] via the support function."""
    b = np.asarray(b, dtype=float)
    return float(-polytope.support(-b)), float(polytope.support(b))
