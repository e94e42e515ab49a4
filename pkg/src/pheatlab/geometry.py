"""Domains, boundary distance, and graded meshes.

Two domain kinds are supported: an n-dimensional ball centered at the
origin, discretized by a 1-D radial mesh (all fields of interest are
radial there), and a 2-D star-shaped region given by boundary-radius
samples phi(theta_k) at equispaced angles, discretized by a polar
triangle mesh.  Both mesh kinds expose the same informal interface used
by the variational layer: per-cell gradients and means of nodal fields,
their adjoints, and quadrature weights that include the full Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

TWO_PI = 2.0 * math.pi


def unit_sphere_area(n: int) -> float:
    """Surface area of the unit (n-1)-sphere in R^n (2*pi for n=2)."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


@dataclass(frozen=True)
class Ball:
    """Ball of radius `radius` centered at the origin in dimension `dim` >= 2."""

    dim: int
    radius: float
    convexity_assumed: bool = True
    # Nonnegative mean curvature of the boundary is part of the standing
    # hypotheses for the boundary-distance kernels; it holds for the ball
    # and is recorded, not verified, elsewhere.

    def __post_init__(self) -> None:
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"ball dimension must be an integer >= 2, got {self.dim}")
        if not (np.isfinite(self.radius) and self.radius > 0.0):
            raise ValueError(f"ball radius must be a positive finite real, got {self.radius}")

    @property
    def volume(self) -> float:
        return unit_sphere_area(self.dim) * self.radius**self.dim / self.dim


@dataclass(frozen=True)
class StarShaped2D:
    """2-D region {r < phi(theta)}, star-shaped with respect to the origin.

    `phi` holds K >= 8 samples of the boundary radius at the equispaced
    angles theta_k = 2*pi*k/K.  Off-sample angles use periodic piecewise
    linear interpolation, and the boundary itself is the closed polyline
    through the sampled vertices.
    """

    phi: np.ndarray

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 1 or phi.size < 8:
            raise ValueError(f"phi needs at least 8 samples, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi samples must be finite")
        if not np.all(phi > 0.0):
            raise ValueError("phi samples must be positive (origin inside the region)")
        object.__setattr__(self, "phi", phi)

    @property
    def num_samples(self) -> int:
        return self.phi.size

    def phi_at(self, theta):
        """Boundary radius at angle(s) theta, periodic piecewise linear."""
        theta = np.asarray(theta, dtype=float)
        k = self.num_samples
        pos = (theta % TWO_PI) / (TWO_PI / k)
        i0 = np.floor(pos).astype(int) % k
        frac = pos - np.floor(pos)
        i1 = (i0 + 1) % k
        return self.phi[i0] * (1.0 - frac) + self.phi[i1] * frac

    def vertices(self) -> np.ndarray:
        """Polyline vertices (K, 2) at the sampled angles."""
        th = np.arange(self.num_samples) * (TWO_PI / self.num_samples)
        return np.column_stack([self.phi * np.cos(th), self.phi * np.sin(th)])

    @property
    def convexity_assumed(self) -> bool:
        """Polygon-convexity check on the boundary polyline (informational)."""
        v = self.vertices()
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        scale = np.max(np.abs(cross)) if cross.size else 1.0
        return bool(np.all(cross >= -1e-12 * max(scale, 1.0)))


Domain = Ball | StarShaped2D


def _polygon_radius(domain: StarShaped2D, theta: np.ndarray) -> np.ndarray:
    """Radius at which the ray at angle theta meets the boundary polyline."""
    return _ring_radius(domain.vertices(), theta)


def _ring_radius(verts: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Radial function of a star polygon with vertices at equispaced angles."""
    k = verts.shape[0]
    dth = TWO_PI / k
    theta = np.asarray(theta, dtype=float)
    i0 = np.floor((theta % TWO_PI) / dth).astype(int) % k
    i1 = (i0 + 1) % k
    a, b = verts[i0], verts[i1]
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    e = b - a
    denom = e[..., 0] * u[..., 1] - e[..., 1] * u[..., 0]
    t = (a[..., 0] * u[..., 1] - a[..., 1] * u[..., 0]) / denom
    hit = a + t[..., None] * e
    return hit[..., 0] * u[..., 0] + hit[..., 1] * u[..., 1]


def _dist_to_polyline(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Min distance from each point (m, 2) to the closed polyline (k, 2)."""
    a = verts
    b = np.roll(verts, -1, axis=0)
    e = b - a
    ee = np.sum(e * e, axis=1)
    pts = np.atleast_2d(points)
    # (m, k, 2) broadcast; fine at the mesh sizes used here
    w = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("mkd,kd->mk", w, e) / ee[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * e[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def contains(domain: Domain, x, rtol: float = 1e-12) -> bool:
    """True when x lies in the closed region (with a tiny relative slack)."""
    x = np.asarray(x, dtype=float)
    if isinstance(domain, Ball):
        return float(np.linalg.norm(x)) <= domain.radius * (1.0 + rtol)
    r = float(np.hypot(x[0], x[1]))
    if r == 0.0:
        return True
    theta = math.atan2(x[1], x[0])
    rb = float(_polygon_radius(domain, np.array([theta]))[0])
    return r <= rb * (1.0 + rtol) + rtol


def distance_to_boundary(domain: Domain, x) -> float:
    """Distance from x to the domain boundary; 0 exactly on the boundary.

    Raises ValueError when x lies outside the closed region.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(domain, Ball):
        if x.shape != (domain.dim,):
            raise ValueError(f"expected a point in R^{domain.dim}, got shape {x.shape}")
        r = float(np.linalg.norm(x))
        if r > domain.radius * (1.0 + 1e-12):
            raise ValueError(f"point with |x|={r} outside ball of radius {domain.radius}")
        return max(domain.radius - r, 0.0)
    if x.shape != (2,):
        raise ValueError(f"expected a point in R^2, got shape {x.shape}")
    if not contains(domain, x):
        raise ValueError(f"point {x.tolist()} outside the star-shaped region")
    return float(_dist_to_polyline(x[None, :], domain.vertices())[0])


def domain_extremes(domain: Domain) -> tuple[float, float]:
    """(D, S): inradius D = sup_x d(x) and outradius S = sup_x |x|."""
    if isinstance(domain, Ball):
        return domain.radius, domain.radius
    verts = domain.vertices()
    s_max = float(np.linalg.norm(verts, axis=1).max())

    # Coarse interior scan along rays (points t*r_b(theta) are inside by
    # star-shapedness), then a local refinement of the signed distance.
    k = domain.num_samples
    thetas = np.arange(4 * k) * (TWO_PI / (4 * k))
    rb = _polygon_radius(domain, thetas)
    ts = np.linspace(0.02, 0.98, 49)
    pts = np.concatenate(
        [np.column_stack([t * rb * np.cos(thetas), t * rb * np.sin(thetas)]) for t in ts]
    )
    pts = np.vstack([pts, [[0.0, 0.0]]])
    d = _dist_to_polyline(pts, verts)
    best = pts[int(np.argmax(d))]

    def negative_signed_distance(q):
        dist = float(_dist_to_polyline(np.asarray(q, dtype=float)[None, :], verts)[0])
        return dist if not contains(domain, q) else -dist

    res = optimize.minimize(
        negative_signed_distance, best, method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-13, "maxiter": 2000},
    )
    d_max = max(float(-res.fun), float(d.max()))
    return d_max, s_max


def _grade(s: np.ndarray, gamma: float, toward_origin: bool, toward_boundary: bool) -> np.ndarray:
    """Power-law grading map on [0, 1], composed toward each requested end."""
    t = np.asarray(s, dtype=float)
    if toward_origin:
        t = t**gamma
    if toward_boundary:
        t = 1.0 - (1.0 - t) ** gamma
    return t


def _hat_masses(r: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact integrals of the P1 hat functions against r^(n-1) dr per cell.

    Returns (rising, falling) arrays over cells; their sum telescopes to
    R^n/n, so lumped node weights conserve the ball volume exactly.
    """
    a, b = r[:-1], r[1:]
    h = b - a
    pow_n = (b**n - a**n) / n
    pow_n1 = (b ** (n + 1) - a ** (n + 1)) / (n + 1)
    rising = (pow_n1 - a * pow_n) / h
    falling = (b * pow_n - pow_n1) / h
    return rising, falling


class RadialMesh:
    """1-D radial mesh on [0, R] for a ball, with r^(n-1) quadrature.

    Nodes are the graded radii; the last node is the single boundary node.
    Cells are the intervals between consecutive nodes.  Fields are P1 in
    r, so per-cell gradients are exact and the cell masses integrate the
    Jacobian exactly.
    """

    def __init__(self, domain: Ball, resolution: int, grading: float,
                 grade_origin: bool, grade_boundary: bool):
        n = domain.dim
        s = np.linspace(0.0, 1.0, resolution)
        r = domain.radius * _grade(s, grading, grade_origin, grade_boundary)
        if np.any(np.diff(r) <= 0.0):
            raise ValueError("grading collapses cells at this resolution; "
                             "reduce the grading exponent or the resolution")
        sigma = unit_sphere_area(n)
        rising, falling = _hat_masses(r, n)

        self.domain = domain
        self.dim = n
        self.grading = grading
        self.params = s
        self.nodes = r
        self.num_nodes = r.size
        self.boundary_mask = np.zeros(r.size, dtype=bool)
        self.boundary_mask[-1] = True
        self.cell_h = np.diff(r)
        self.cell_weights = sigma * (r[1:] ** n - r[:-1] ** n) / n
        w = np.zeros(r.size)
        w[:-1] += falling
        w[1:] += rising
        self.node_weights = sigma * w

        # geometry seen by the kernels, at nodes and at cell midpoints
        mid = 0.5 * (r[:-1] + r[1:])
        self.node_absx = r
        self.node_d = domain.radius - r
        self.node_theta = np.zeros_like(r)
        self.node_rhat = r / domain.radius
        self.node_phi = np.full_like(r, domain.radius)
        self.quad_absx = mid
        self.quad_d = domain.radius - mid
        self.quad_theta = np.zeros_like(mid)
        self.quad_phi = np.full_like(mid, domain.radius)

    @property
    def num_cells(self) -> int:
        return self.cell_h.size

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        return np.diff(values) / self.cell_h

    def scatter_gradients(self, per_cell: np.ndarray) -> np.ndarray:
        """Adjoint of cell_gradients: sum_c q_c * d(grad_c)/d(u_i)."""
        q = per_cell / self.cell_h
        out = np.zeros(self.num_nodes)
        out[:-1] -= q
        out[1:] += q
        return out

    def cell_means(self, values: np.ndarray) -> np.ndarray:
        return 0.5 * (values[:-1] + values[1:])

    def scatter_means(self, per_cell: np.ndarray) -> np.ndarray:
        out = np.zeros(self.num_nodes)
        out[:-1] += 0.5 * per_cell
        out[1:] += 0.5 * per_cell
        return out

    def gradient_hessian_matrix(self, coeff: np.ndarray):
        """Sparse matrix sum_c coeff_c * g_c' g_c (rows/cols over all nodes)."""
        import scipy.sparse as sp

        c = coeff / self.cell_h**2
        m = self.num_nodes
        main = np.zeros(m)
        main[:-1] += c
        main[1:] += c
        off = -c
        return sp.diags([off, main, off], [-1, 0, 1], format="csc")

    def means_hessian_matrix(self, coeff: np.ndarray):
        """Sparse matrix sum_c coeff_c * m_c' m_c with m_c the cell-mean map."""
        import scipy.sparse as sp

        m = self.num_nodes
        main = np.zeros(m)
        main[:-1] += 0.25 * coeff
        main[1:] += 0.25 * coeff
        off = 0.25 * coeff
        return sp.diags([off, main, off], [-1, 0, 1], format="csc")


class PolarTriMesh:
    """Triangulated polar mesh for a 2-D star-shaped region.

    Nodes sit on rings r_hat_k * phi(theta_j) plus a single origin node;
    cells are a fan around the origin and split quads between rings.
    Boundary distance at quadrature points is measured against the mesh's
    own boundary polygon so that quadrature and geometry agree.
    """

    def __init__(self, domain: StarShaped2D, resolution: int, grading: float,
                 grade_origin: bool, grade_boundary: bool, angular_resolution: int):
        n_r, n_t = resolution, angular_resolution
        s_rings = np.arange(1, n_r + 1) / n_r
        rhat = _grade(s_rings, grading, grade_origin, grade_boundary)
        if rhat[0] <= 0.0 or np.any(np.diff(rhat) <= 0.0):
            raise ValueError("grading collapses rings at this resolution; "
                             "reduce the grading exponent or the resolution")
        thetas = np.arange(n_t) * (TWO_PI / n_t)
        phis = domain.phi_at(thetas)

        # node 0 is the origin; ring k occupies [1 + (k-1)*n_t, 1 + k*n_t)
        pts = [np.zeros((1, 2))]
        for rk in rhat:
            pts.append(np.column_stack([rk * phis * np.cos(thetas), rk * phis * np.sin(thetas)]))
        points = np.concatenate(pts)

        def node_id(k, j):  # ring k >= 1
            return 1 + (k - 1) * n_t + (j % n_t)

        tris = []
        for j in range(n_t):
            tris.append((0, node_id(1, j), node_id(1, j + 1)))
        for k in range(1, n_r):
            for j in range(n_t):
                a, b = node_id(k, j), node_id(k + 1, j)
                c, d = node_id(k + 1, j + 1), node_id(k, j + 1)
                tris.append((a, b, c))
                tris.append((a, c, d))
        triangles = np.asarray(tris, dtype=int)

        p0 = points[triangles[:, 0]]
        p1 = points[triangles[:, 1]]
        p2 = points[triangles[:, 2]]
        det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        if np.any(det <= 0):
            raise ValueError("mesh construction produced degenerate triangles")
        area = 0.5 * det
        # P1 basis gradients: grad lambda_i = perp(p_{i+2} - p_{i+1}) / (2A)
        grads = np.empty((triangles.shape[0], 3, 2))
        for i, (jn, kn) in enumerate(((1, 2), (2, 0), (0, 1))):
            e = points[triangles[:, kn]] - points[triangles[:, jn]]
            grads[:, i, 0] = -e[:, 1] / det
            grads[:, i, 1] = e[:, 0] / det

        self.domain = domain
        self.dim = 2
        self.grading = grading
        self.points = points
        self.num_nodes = points.shape[0]
        self.triangles = triangles
        self.cell_weights = area
        self.basis_grads = grads
        self.boundary_mask = np.zeros(self.num_nodes, dtype=bool)
        self.boundary_mask[1 + (n_r - 1) * n_t:] = True

        w = np.zeros(self.num_nodes)
        np.add.at(w, triangles.ravel(), np.repeat(area / 3.0, 3))
        self.node_weights = w

        self.params = np.concatenate([[0.0], np.repeat(s_rings, n_t)])
        self.node_rhat = np.concatenate([[0.0], np.repeat(rhat, n_t)])
        self.node_theta = np.concatenate([[0.0], np.tile(thetas, n_r)])
        self.node_absx = np.linalg.norm(points, axis=1)

        # quadrature geometry is measured against the mesh's own boundary
        # polygon, so the kernels' singular sets sit exactly where the
        # discrete fields vanish
        boundary_poly = points[1 + (n_r - 1) * n_t:]
        self.node_d = _dist_to_polyline(points, boundary_poly)
        self.node_d[self.boundary_mask] = 0.0
        self.node_phi = _ring_radius(boundary_poly, self.node_theta)
        centroids = (p0 + p1 + p2) / 3.0
        self.quad_points = centroids
        self.quad_absx = np.linalg.norm(centroids, axis=1)
        self.quad_theta = np.arctan2(centroids[:, 1], centroids[:, 0]) % TWO_PI
        self.quad_d = _dist_to_polyline(centroids, boundary_poly)
        self.quad_phi = _ring_radius(boundary_poly, self.quad_theta)

    @property
    def num_cells(self) -> int:
        return self.triangles.shape[0]

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        v = values[self.triangles]  # (T, 3)
        return np.einsum("ti,tid->td", v, self.basis_grads)

    def scatter_gradients(self, per_cell: np.ndarray) -> np.ndarray:
        contrib = np.einsum("td,tid->ti", per_cell, self.basis_grads)
        out = np.zeros(self.num_nodes)
        np.add.at(out, self.triangles.ravel(), contrib.ravel())
        return out

    def cell_means(self, values: np.ndarray) -> np.ndarray:
        return values[self.triangles].mean(axis=1)

    def scatter_means(self, per_cell: np.ndarray) -> np.ndarray:
        out = np.zeros(self.num_nodes)
        np.add.at(out, self.triangles.ravel(), np.repeat(per_cell / 3.0, 3))
        return out

    def gradient_hessian_matrix(self, coeff) -> "scipy.sparse.csc_matrix":
        """Sparse sum_c grads_c' diag-or-tensor coeff_c grads_c.

        `coeff` is either (T,) scalars or (T, 2, 2) tensors per cell.
        """
        import scipy.sparse as sp

        g = self.basis_grads
        coeff = np.asarray(coeff)
        if coeff.ndim == 1:
            ag = coeff[:, None, None] * g
        else:
            ag = np.einsum("tde,tie->tid", coeff, g)
        block = np.einsum("tid,tjd->tij", g, ag)
        t = self.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        return sp.csc_matrix((block.ravel(), (rows, cols)),
                             shape=(self.num_nodes, self.num_nodes))

    def means_hessian_matrix(self, coeff: np.ndarray):
        import scipy.sparse as sp

        t = self.triangles
        block = np.repeat(coeff / 9.0, 9).reshape(-1, 3, 3)
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        return sp.csc_matrix((block.ravel(), (rows, cols)),
                             shape=(self.num_nodes, self.num_nodes))


Mesh = RadialMesh | PolarTriMesh


def build_mesh(domain: Domain, resolution: int, grading: float = 1.0, *,
               grade_origin: bool = False, grade_boundary: bool = True,
               angular_resolution: int | None = None) -> Mesh:
    """Build the mesh for a domain.

    `resolution` counts radial nodes (ball) or radial rings (star-shaped);
    star-shaped meshes default to resolution//2 angular nodes.  Grading
    gamma >= 1 clusters nodes toward the boundary and/or the origin.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    if grading < 1.0:
        raise ValueError(f"grading must be >= 1, got {grading}")
    if isinstance(domain, Ball):
        return RadialMesh(domain, resolution, grading, grade_origin, grade_boundary)
    n_t = angular_resolution if angular_resolution is not None else max(16, resolution // 2)
    if n_t < 8:
        raise ValueError(f"angular resolution must be >= 8, got {n_t}")
    return PolarTriMesh(domain, resolution, grading, grade_origin, grade_boundary, n_t)
