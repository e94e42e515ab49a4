"""Discrete energies, norms, the p-Laplacian, and the first eigenpair.

Fields are P1 in the mesh nodes and vanish on the boundary.  The
p-Dirichlet energy uses the exact per-cell gradients, so the energy of a
discrete field equals the energy of the conforming function it
represents.  Weighted integrals evaluate the kernel at cell midpoints
(centroids), which stay strictly inside the domain, so untruncated
quadrature is finite whenever the field keeps away from the singular set
and the one-point rule errs on the conservative side for the convex
kernels used here.

The eigen solver minimizes the Rayleigh quotient by projected gradient
descent in a Sobolev metric (descent direction preconditioned by the
linear stiffness operator) with Armijo line search, positivity
projection, and renormalization of the weighted norm each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh
from .potentials import Potential, potential_on_mesh


class QuadratureDivergence(RuntimeError):
    """Untruncated weighted quadrature hit a singular point with nonzero field."""


@dataclass
class GridFunction:
    """Nodal values of a scalar field, pinned to 0 on boundary nodes."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.num_nodes,):
            raise ValueError(f"expected {self.mesh.num_nodes} nodal values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("nodal values must be finite")
        v = v.copy()
        v[self.mesh.boundary_mask] = 0.0
        self.values = v

    def copy(self) -> "GridFunction":
        return GridFunction(self.mesh, self.values.copy())


def grid_function(mesh: Mesh, values) -> GridFunction:
    return GridFunction(mesh, np.asarray(values, dtype=float))


def l2_norm(u: GridFunction) -> float:
    return float(np.sqrt(np.sum(u.mesh.node_weights * u.values**2)))


def linf_norm(u: GridFunction) -> float:
    return float(np.max(np.abs(u.values)))


def _check_p(p: float, delta: float) -> None:
    if not p > 1.0:
        raise ValueError(f"exponent must satisfy p > 1, got {p}")
    if p < 2.0 and delta <= 0.0:
        raise ValueError(f"p = {p} < 2 requires a regularization delta > 0")


def dirichlet_energy(u: GridFunction, p: float, delta: float = 0.0) -> float:
    """Integral of |grad u|^p (regularized to (|g|^2+delta^2)^(p/2) - delta^p)."""
    if not p > 1.0:
        raise ValueError(f"exponent must satisfy p > 1, got {p}")
    g = u.mesh.cell_gradients(u.values)
    g2 = g**2 if g.ndim == 1 else np.sum(g**2, axis=1)
    if delta > 0.0:
        dens = (g2 + delta**2) ** (p / 2.0) - delta**p
    else:
        dens = g2 ** (p / 2.0)
    return float(np.sum(u.mesh.cell_weights * dens))


def energy_gradient(u: GridFunction, p: float, delta: float = 0.0) -> np.ndarray:
    """Nodal gradient of dirichlet_energy(.)/p; zero rows on the boundary."""
    _check_p(p, delta)
    mesh = u.mesh
    g = mesh.cell_gradients(u.values)
    if g.ndim == 1:
        g2 = g**2
        coeff = (g2 + delta**2) ** ((p - 2.0) / 2.0) if delta > 0.0 else _safe_pow(g2, (p - 2.0) / 2.0)
        out = mesh.scatter_gradients(mesh.cell_weights * coeff * g)
    else:
        g2 = np.sum(g**2, axis=1)
        coeff = (g2 + delta**2) ** ((p - 2.0) / 2.0) if delta > 0.0 else _safe_pow(g2, (p - 2.0) / 2.0)
        out = mesh.scatter_gradients((mesh.cell_weights * coeff)[:, None] * g)
    out[mesh.boundary_mask] = 0.0
    return out


def _safe_pow(g2: np.ndarray, q: float) -> np.ndarray:
    """g2**q with the convention 0**negative -> 0 (vanishing flux at g=0, p>=2)."""
    if q >= 0.0:
        return g2**q
    with np.errstate(divide="ignore"):
        return np.where(g2 > 0.0, g2**q, 0.0)


def p_laplacian_apply(u: GridFunction, p: float, delta: float = 0.0) -> GridFunction:
    """Consistent discrete p-Laplacian: -(mass)^(-1) grad of energy/p."""
    grad = energy_gradient(u, p, delta)
    vals = np.zeros_like(grad)
    interior = ~u.mesh.boundary_mask
    vals[interior] = -grad[interior] / u.mesh.node_weights[interior]
    return GridFunction(u.mesh, vals)


def weighted_cell_values(pot: Potential | None, mesh: Mesh, cap: float | None) -> np.ndarray:
    if pot is None:
        return np.ones(mesh.num_cells)
    return potential_on_mesh(pot, mesh, where="cells", cap=cap)


def weighted_pnorm(u: GridFunction, pot: Potential | None, cap: float | None, p: float) -> float:
    """Integral of W_cap * |u|^p (W = 1 when pot is None; untruncated when cap is None).

    Untruncated quadrature uses interior quadrature points only; if the
    kernel is singular at one of them while the field is nonzero there,
    the integral does not converge and QuadratureDivergence is raised.
    """
    if not p > 0.0:
        raise ValueError(f"norm exponent must be positive, got {p}")
    mesh = u.mesh
    w = weighted_cell_values(pot, mesh, cap)
    ubar = np.abs(mesh.cell_means(u.values)) ** p
    contrib = mesh.cell_weights * w * ubar
    bad = ~np.isfinite(contrib) & (ubar > 0.0)
    if np.any(bad):
        raise QuadratureDivergence(
            "untruncated weighted quadrature diverges: kernel singular at "
            f"{int(np.count_nonzero(bad))} quadrature points with nonzero field"
        )
    return float(np.sum(np.where(np.isfinite(contrib), contrib, 0.0)))


def weighted_gradient(u: GridFunction, pot: Potential | None, cap: float | None, p: float) -> np.ndarray:
    """Nodal gradient of weighted_pnorm(.)/p; zero rows on the boundary."""
    mesh = u.mesh
    w = weighted_cell_values(pot, mesh, cap)
    ubar = mesh.cell_means(u.values)
    out = mesh.scatter_means(mesh.cell_weights * w * np.abs(ubar) ** (p - 2.0) * ubar)
    out[mesh.boundary_mask] = 0.0
    return out


def weighted_reaction_apply(u: GridFunction, pot: Potential | None, cap: float | None,
                            p: float) -> GridFunction:
    """Strong form of the weighted term W|u|^(p-2)u in the mesh's own calculus."""
    grad = weighted_gradient(u, pot, cap, p)
    vals = np.zeros_like(grad)
    interior = ~u.mesh.boundary_mask
    vals[interior] = grad[interior] / u.mesh.node_weights[interior]
    return GridFunction(u.mesh, vals)


def rayleigh_quotient(u: GridFunction, pot: Potential | None, cap: float | None, p: float) -> float:
    """dirichlet_energy / weighted_pnorm for a nonzero field."""
    denom = weighted_pnorm(u, pot, cap, p)
    if denom == 0.0:
        raise ValueError("Rayleigh quotient undefined: weighted norm vanishes")
    return dirichlet_energy(u, p) / denom


@dataclass
class EigenPair:
    """First eigenvalue and normalized positive eigenfunction of the weighted problem."""

    value: float
    eigfun: GridFunction
    residual: float
    iterations: int
    converged: bool


def _dual_norm(mesh: Mesh, weak_vector: np.ndarray) -> float:
    """Mass-weighted dual norm of a weak-form residual: sqrt(sum g_i^2 / w_i)."""
    interior = ~mesh.boundary_mask
    return float(np.sqrt(np.sum(weak_vector[interior] ** 2 / mesh.node_weights[interior])))


def stiffness_preconditioner(mesh: Mesh):
    """Factorized linear stiffness operator on interior nodes (Sobolev metric).

    Cached on the mesh: construction is single-threaded and meshes are
    immutable afterwards.
    """
    cached = getattr(mesh, "_stiffness_cache", None)
    if cached is not None:
        return cached
    k2 = mesh.gradient_hessian_matrix(mesh.cell_weights)
    interior = np.flatnonzero(~mesh.boundary_mask)
    k2 = k2[np.ix_(interior, interior)].tocsc()
    lu = spla.splu(k2)
    mesh._stiffness_cache = (interior, lu)
    return interior, lu


def dual_norm(mesh: Mesh, weak_vector: np.ndarray) -> float:
    """Discrete dual norm of a weak-form residual on the zero-boundary space.

    The norm induced by the inverse linear stiffness operator,
    sqrt(g' K^(-1) g); the natural strength of a residual functional
    against fields of unit Dirichlet energy.
    """
    interior, lu = stiffness_preconditioner(mesh)
    g = weak_vector[interior]
    return float(np.sqrt(max(np.dot(g, lu.solve(g)), 0.0)))


def first_eigenpair(pot: Potential | None, cap: float, p: float, mesh: Mesh,
                    tol: float = 1e-8, max_iter: int = 20000,
                    delta: float = 0.0) -> EigenPair:
    """Minimize the Rayleigh quotient over discrete fields vanishing on the boundary.

    Preconditioned projected gradient descent with Armijo line search;
    the iterate is kept positive (|u| projection, the quotient is even)
    and renormalized to weighted norm 1 each step.  Terminates when the
    dual norm of the quotient gradient drops below tol; if the iteration
    cap is reached first, the best iterate so far is returned with
    converged=False.
    """
    if cap is None or not np.isfinite(cap):
        raise ValueError("first_eigenpair requires a finite truncation level")
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    _check_p(p, delta)

    interior, lu = stiffness_preconditioner(mesh)

    u = np.maximum(mesh.node_d.copy(), 0.0)  # distance profile: positive, admissible
    u[mesh.boundary_mask] = 0.0
    gf = GridFunction(mesh, u)
    denom = weighted_pnorm(gf, pot, cap, p)
    if denom <= 0:
        raise RuntimeError("initial iterate has vanishing weighted norm")
    gf.values /= denom ** (1.0 / p)

    def quotient_and_grad(g: GridFunction):
        e = dirichlet_energy(g, p, delta)
        f = weighted_pnorm(g, pot, cap, p)
        lam = e / f
        grad = energy_gradient(g, p, delta) - lam * weighted_gradient(g, pot, cap, p)
        grad_r = (p / f) * grad  # gradient of e/f at g
        return lam, grad_r

    def residual_of(grad_vec):
        # weak eigen-equation residual is grad_r / p; measure it in the
        # stiffness-dual norm
        g = grad_vec[interior]
        return float(np.sqrt(max(np.dot(g, lu.solve(g)), 0.0))) / p

    lam, grad_r = quotient_and_grad(gf)
    best = (lam, gf.copy(), residual_of(grad_r))
    iterations = 0
    step = 1.0
    for iterations in range(1, max_iter + 1):
        res = residual_of(grad_r)
        if res <= tol:
            return EigenPair(lam, gf, res, iterations - 1, True)
        direction = np.zeros(mesh.num_nodes)
        direction[interior] = -lu.solve(grad_r[interior])
        slope = float(np.dot(grad_r, direction))
        if slope >= 0.0:  # preconditioner lost descent; fall back to plain gradient
            direction = -grad_r
            slope = float(np.dot(grad_r, direction))
        step = min(4.0 * step, 1.0)
        accepted = False
        for _ in range(60):
            trial = gf.values + step * direction
            trial = np.abs(trial)
            tg = GridFunction(mesh, trial)
            f = weighted_pnorm(tg, pot, cap, p)
            if f > 0.0:
                tg.values /= f ** (1.0 / p)
                lam_t = rayleigh_quotient(tg, pot, cap, p)
                if lam_t <= lam + 1e-4 * step * slope:
                    gf, lam = tg, lam_t
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break  # line search floor: rounding noise dominates
        lam, grad_r = quotient_and_grad(gf)
        res = residual_of(grad_r)
        if lam < best[0]:
            best = (lam, gf.copy(), res)

    lam, gf, res = best
    lam, grad_r = quotient_and_grad(gf)
    res = residual_of(grad_r)
    return EigenPair(lam, gf, res, iterations, res <= tol)
