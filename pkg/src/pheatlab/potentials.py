"""Singular kernels, their truncations, and the sharp constants.

Four kernel families are provided, singular on the boundary, at the
origin, or at both:

  dist_power   d(x)^(-p)                                   p > 1
  dist_log     d^(-p) * (1 + p/(2(p-1)) * log^(-2)(d/D))   p > n
  origin_log   (|x| * log(R/|x|))^(-n)                     p = n
  star_hardy   |x|^(m-n) * |phi^m(theta) - |x|^m|^(-p)     p > n, m=(p-n)/(p-1)

Evaluation returns +inf exactly on the singular set; truncation caps the
kernel at a level `cap`, which makes every quadrature finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Ball, Domain, Mesh, StarShaped2D, distance_to_boundary, domain_extremes


class PotentialKind(str, Enum):
    DIST_POWER = "dist_power"
    DIST_LOG = "dist_log"
    ORIGIN_LOG = "origin_log"
    STAR_HARDY = "star_hardy"


_KIND_ALIASES = {
    "i": PotentialKind.DIST_POWER,
    "ii": PotentialKind.DIST_LOG,
    "iii": PotentialKind.ORIGIN_LOG,
    "iv": PotentialKind.STAR_HARDY,
}


def kind_from_name(name: str) -> PotentialKind:
    key = str(name).strip().lower()
    if key in _KIND_ALIASES:
        return _KIND_ALIASES[key]
    try:
        return PotentialKind(key)
    except ValueError:
        valid = sorted(k.value for k in PotentialKind) + sorted(_KIND_ALIASES)
        raise ValueError(f"unknown kernel kind {name!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class Potential:
    """A singular kernel with its parameters.

    D (dist_log) and R (origin_log) are the logarithmic reference scales;
    m is derived for star_hardy and stored for inspection.
    """

    kind: PotentialKind
    p: float
    n: int
    D: float | None = None
    R: float | None = None
    m: float | None = None

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"dimension n must be an integer >= 2, got {self.n}")
        if not (np.isfinite(self.p) and self.p > 1.0):
            raise ValueError(f"exponent p must satisfy p > 1, got {self.p}")
        k, p, n = self.kind, self.p, self.n
        if k is PotentialKind.DIST_LOG:
            if not p > n:
                raise ValueError(f"dist_log requires p > n, got p={p}, n={n}")
            if self.D is None or not self.D > 0:
                raise ValueError("dist_log requires a positive scale D")
        elif k is PotentialKind.ORIGIN_LOG:
            if p != n:
                raise ValueError(f"origin_log requires p = n, got p={p}, n={n}")
            if self.R is None or not self.R > 0:
                raise ValueError("origin_log requires a positive scale R")
        elif k is PotentialKind.STAR_HARDY:
            if not p > n:
                raise ValueError(f"star_hardy requires p > n, got p={p}, n={n}")
            object.__setattr__(self, "m", (p - n) / (p - 1.0))


def make_potential(kind: PotentialKind | str, domain: Domain, p: float | None = None,
                   D: float | None = None, R: float | None = None) -> Potential:
    """Build a kernel for a domain, filling defaults and checking coupling.

    Defaults: D = e * inradius, the smallest scale for which the extra
    logarithmic term of dist_log stays bounded away from its interior
    singularity (the factor equals (1 - log(d/sup d))^(-2) then); and
    R = 1.01 * e * outradius, keeping log(R/|x|) > 1 inside.
    """
    kind = kind_from_name(kind) if not isinstance(kind, PotentialKind) else kind
    n = domain.dim if isinstance(domain, Ball) else 2
    if kind is PotentialKind.ORIGIN_LOG:
        if p is not None and p != n:
            raise ValueError(f"origin_log requires p = n = {n}, got p={p}")
        p = float(n)
    if p is None:
        raise ValueError("exponent p is required")
    d_sup, s_sup = domain_extremes(domain)
    if kind is PotentialKind.DIST_LOG and D is None:
        D = math.e * d_sup
    if kind is PotentialKind.ORIGIN_LOG and R is None:
        R = 1.01 * math.e * s_sup
    pot = Potential(kind=kind, p=float(p), n=n, D=D, R=R)
    validate_for_domain(pot, domain)
    return pot


def validate_for_domain(pot: Potential, domain: Domain) -> None:
    """Checks that couple a kernel to a concrete domain."""
    n = domain.dim if isinstance(domain, Ball) else 2
    if pot.n != n:
        raise ValueError(f"kernel dimension n={pot.n} does not match the domain (n={n})")
    if pot.kind is PotentialKind.DIST_LOG:
        d_sup, _ = domain_extremes(domain)
        if pot.D < d_sup * (1.0 - 1e-12):
            raise ValueError(f"dist_log requires D >= sup d(x) = {d_sup}, got D={pot.D}")
    if pot.kind is PotentialKind.ORIGIN_LOG:
        _, s_sup = domain_extremes(domain)
        if pot.R <= math.e * s_sup:
            raise ValueError(f"origin_log requires R > e * sup|x| = {math.e * s_sup}, got R={pot.R}")
    if pot.kind is PotentialKind.STAR_HARDY and not isinstance(domain, (Ball, StarShaped2D)):
        raise ValueError("star_hardy requires a ball or a 2-D star-shaped domain")


def _phi_of(domain: Domain):
    if isinstance(domain, Ball):
        radius = domain.radius
        return lambda theta: np.full_like(np.asarray(theta, dtype=float), radius)
    return domain.phi_at


def eval_potential_arrays(pot: Potential, domain: Domain, d, absx, theta,
                          phi_vals=None) -> np.ndarray:
    """Vectorized kernel values from precomputed geometry; +inf on the singular set.

    `phi_vals` overrides the boundary-radius values used by the star
    kernel (meshes pass the radial function of their own boundary
    polygon, so the singular surface coincides with the discrete
    boundary); by default the domain's sampled interpolant is used.
    """
    d = np.asarray(d, dtype=float)
    absx = np.asarray(absx, dtype=float)
    p, n = pot.p, pot.n
    with np.errstate(divide="ignore", over="ignore"):
        if pot.kind is PotentialKind.DIST_POWER:
            return np.where(d > 0, d**-p, np.inf)
        if pot.kind is PotentialKind.DIST_LOG:
            base = np.where(d > 0, d**-p, np.inf)
            t = np.log(np.where(d > 0, d, 1.0) / pot.D)
            extra = np.where(t != 0.0, 1.0 / (t * t), np.inf)
            extra = np.where(d > 0, extra, 0.0)  # at d=0 the base is already inf
            return base * (1.0 + (p / (2.0 * (p - 1.0))) * extra)
        if pot.kind is PotentialKind.ORIGIN_LOG:
            s = np.where(absx > 0, absx * np.log(pot.R / np.where(absx > 0, absx, 1.0)), 0.0)
            return np.where(s > 0, s**-n, np.inf)
        # star_hardy
        m = pot.m
        phi = np.asarray(phi_vals, dtype=float) if phi_vals is not None \
            else _phi_of(domain)(theta)
        gap = np.abs(phi**m - np.where(absx > 0, absx, 1.0) ** m)
        val = np.where(absx > 0, absx, 1.0) ** (m - n) * np.where(gap > 0, gap**-p, np.inf)
        return np.where(absx > 0, val, np.inf)


def eval_potential(pot: Potential, domain: Domain, x) -> float:
    """Kernel value at a point inside the domain; +inf on the singular set."""
    validate_for_domain(pot, domain)
    x = np.asarray(x, dtype=float)
    d = distance_to_boundary(domain, x)
    absx = float(np.linalg.norm(x))
    theta = math.atan2(x[1], x[0]) if x.shape == (2,) else 0.0
    return float(eval_potential_arrays(pot, domain, d, absx, theta))


def truncate_potential(pot: Potential, domain: Domain, x, cap: float) -> float:
    """min(cap, W(x)); finite everywhere, equals cap on the singular set."""
    if not cap > 0:
        raise ValueError(f"truncation level must be positive, got {cap}")
    return min(float(cap), eval_potential(pot, domain, x))


def optimal_constant(pot: Potential) -> float:
    """Sharp constant of the inequality int |grad u|^p >= C int W |u|^p."""
    p, n = pot.p, pot.n
    if pot.kind in (PotentialKind.DIST_POWER, PotentialKind.DIST_LOG):
        return ((p - 1.0) / p) ** p
    if pot.kind is PotentialKind.ORIGIN_LOG:
        return ((n - 1.0) / n) ** n
    return ((p - n) / p) ** p


def potential_on_mesh(pot: Potential, mesh: Mesh, where: str = "cells",
                      cap: float | None = None) -> np.ndarray:
    """Kernel values at mesh quadrature points ("cells") or at nodes.

    With a finite `cap` the result is the truncated kernel, finite
    everywhere; without one, singular points carry +inf.
    """
    validate_for_domain(pot, mesh.domain)
    if where == "cells":
        vals = eval_potential_arrays(pot, mesh.domain, mesh.quad_d, mesh.quad_absx,
                                     mesh.quad_theta, phi_vals=mesh.quad_phi)
    elif where == "nodes":
        vals = eval_potential_arrays(pot, mesh.domain, mesh.node_d, mesh.node_absx,
                                     mesh.node_theta, phi_vals=mesh.node_phi)
    else:
        raise ValueError(f"where must be 'cells' or 'nodes', got {where!r}")
    if cap is not None:
        if not cap > 0:
            raise ValueError(f"truncation level must be positive, got {cap}")
        vals = np.minimum(vals, cap)
    return vals
