"""Time integration of the truncated problem and the blow-up machinery.

The evolution u_t - div(|grad u|^(p-2) grad u) = mu * W_cap * |u|^(p-2) u
is integrated by an IMEX scheme: the reaction is explicit (nodal values
of the truncated kernel), the diffusion is the backward-Euler proximal
step of the p-Dirichlet energy, solved by damped Newton warm-started
from the previous level.  Steps adapt: halved on inner failure or on
more than 10% sup-norm growth, doubled back toward dt0 when smooth.

Blow-up is declared when the sup norm crosses a threshold; separable
sub-solutions profile(x) * T(t) with T' = T^(p-1) provide the certified
lower bound and the predicted latest blow-up time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh
from .potentials import Potential, potential_on_mesh
from .variational import (
    EigenPair,
    GridFunction,
    QuadratureDivergence,
    _check_p,
    _dual_norm,
    _safe_pow,
    dual_norm,
    dirichlet_energy,
    energy_gradient,
    first_eigenpair,
    l2_norm,
    linf_norm,
    weighted_gradient,
    weighted_pnorm,
)

COMPLETED = "completed"
BLOW_UP = "blow_up"
STEP_UNDERFLOW = "step_underflow"


class StepRejected(RuntimeError):
    """Inner proximal solve failed to converge; the caller halves dt."""


@dataclass
class EvolutionConfig:
    mu: float
    p: float
    pot: Potential | None
    cap: float
    u0: GridFunction
    t_end: float
    dt0: float
    blow_threshold: float | None = None  # None: 1e6 * |u0|_inf
    dt_min: float = 1e-12
    delta: float = 0.0
    inner_tol: float = 1e-8
    inner_max_iter: int = 60
    growth_limit: float = 1.1
    record_fields: bool = False
    max_steps: int = 2_000_000

    def __post_init__(self) -> None:
        _check_p(self.p, self.delta)
        if not (self.t_end > 0 and self.dt0 > 0 and self.dt_min > 0):
            raise ValueError("t_end, dt0 and dt_min must be positive")
        if self.blow_threshold is not None and not self.blow_threshold > 0:
            raise ValueError("blow_threshold must be positive")

    def resolved_blow_threshold(self) -> float:
        if self.blow_threshold is not None:
            return self.blow_threshold
        return 1e6 * max(linf_norm(self.u0), 1e-300)


@dataclass
class SimulationTrace:
    times: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    dirichlet: np.ndarray
    weighted: np.ndarray
    status: str
    t_star: float | None = None
    fields: list[np.ndarray] | None = None


class _ProximalStepper:
    """Workspace for the backward-Euler diffusion step on one mesh."""

    def __init__(self, mesh: Mesh, p: float, delta: float, tol: float, max_iter: int):
        self.mesh = mesh
        self.p = p
        self.delta = delta
        self.tol = tol
        self.max_iter = max_iter
        self.interior = np.flatnonzero(~mesh.boundary_mask)
        self.mass = mesh.node_weights

    def _hessian_coeff(self, g: np.ndarray):
        p, d2 = self.p, self.delta**2
        if g.ndim == 1:
            g2 = g**2
            if self.delta > 0.0:
                return (g2 + d2) ** ((p - 4.0) / 2.0) * ((p - 1.0) * g2 + d2)
            return (p - 1.0) * _safe_pow(g2, (p - 2.0) / 2.0)
        g2 = np.sum(g**2, axis=1)
        if self.delta > 0.0:
            alpha = (g2 + d2) ** ((p - 2.0) / 2.0)
            beta = (p - 2.0) * (g2 + d2) ** ((p - 4.0) / 2.0)
        else:
            alpha = _safe_pow(g2, (p - 2.0) / 2.0)
            beta = (p - 2.0) * _safe_pow(g2, (p - 4.0) / 2.0)
        tensors = beta[:, None, None] * np.einsum("td,te->tde", g, g)
        tensors[:, 0, 0] += alpha
        tensors[:, 1, 1] += alpha
        return tensors

    def energy_hessian(self, u: GridFunction):
        g = self.mesh.cell_gradients(u.values)
        coeff = self._hessian_coeff(g)
        if np.ndim(coeff) == 1:
            return self.mesh.gradient_hessian_matrix(self.mesh.cell_weights * coeff)
        return self.mesh.gradient_hessian_matrix(self.mesh.cell_weights[:, None, None] * coeff)

    def solve(self, g_vals: np.ndarray, dt: float, warm: np.ndarray) -> np.ndarray:
        """Minimize |v-g|^2_(L2)/(2dt) + energy/p over interior values."""
        mesh, p, delta = self.mesh, self.p, self.delta
        idx = self.interior
        v = warm.copy()
        v[mesh.boundary_mask] = 0.0

        def objective(vals):
            gf = GridFunction(mesh, vals)
            misfit = 0.5 / dt * np.sum(self.mass * (vals - g_vals) ** 2)
            return misfit + dirichlet_energy(gf, p, delta) / p, gf

        def gradient(gf):
            grad = self.mass * (gf.values - g_vals) / dt + energy_gradient(gf, p, delta)
            grad[mesh.boundary_mask] = 0.0
            return grad

        obj, gf = objective(v)
        grad = gradient(gf)
        gnorm0 = max(_dual_norm(mesh, grad), 1e-300)
        for _ in range(self.max_iter):
            gnorm = _dual_norm(mesh, grad)
            if gnorm <= self.tol * gnorm0 or gnorm <= 1e-14 * max(1.0, gnorm0):
                return gf.values
            hess = self.energy_hessian(gf) + sp.diags(self.mass / dt)
            hsub = hess[np.ix_(idx, idx)].tocsc()
            try:
                delta_v = spla.splu(hsub).solve(-grad[idx])
            except RuntimeError as exc:
                raise StepRejected(f"singular proximal Hessian: {exc}") from exc
            step = 1.0
            slope = float(np.dot(grad[idx], delta_v))
            accepted = False
            for _ in range(50):
                trial = gf.values.copy()
                trial[idx] += step * delta_v
                obj_t, gf_t = objective(trial)
                if obj_t <= obj + 1e-4 * step * slope:
                    gf, obj = gf_t, obj_t
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                raise StepRejected("proximal line search stalled")
            grad = gradient(gf)
        raise StepRejected("proximal Newton iteration cap exceeded")


def _nodal_kernel(cfg: EvolutionConfig) -> np.ndarray:
    if cfg.pot is None:
        return np.ones(cfg.u0.mesh.num_nodes)
    return potential_on_mesh(cfg.pot, cfg.u0.mesh, where="nodes", cap=cfg.cap)


def step(u: GridFunction, cfg: EvolutionConfig, dt: float,
         _stepper: _ProximalStepper | None = None,
         _kernel: np.ndarray | None = None) -> GridFunction:
    """One IMEX step: explicit reaction, implicit p-Laplacian diffusion."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if u.mesh is not cfg.u0.mesh:
        raise ValueError("field and configuration live on different meshes")
    if not np.all(np.isfinite(u.values)):
        raise ValueError("field must be finite")
    stepper = _stepper or _ProximalStepper(u.mesh, cfg.p, cfg.delta, cfg.inner_tol, cfg.inner_max_iter)
    kernel = _kernel if _kernel is not None else _nodal_kernel(cfg)
    reaction = cfg.mu * kernel * np.abs(u.values) ** (cfg.p - 2.0) * u.values
    g = u.values + dt * reaction
    g[u.mesh.boundary_mask] = 0.0
    if not np.all(np.isfinite(g)):
        raise StepRejected("explicit reaction produced non-finite values")
    vals = stepper.solve(g, dt, warm=u.values)
    return GridFunction(u.mesh, vals)


def solve_pheat(cfg: EvolutionConfig) -> SimulationTrace:
    """Integrate with adaptive steps; see module docstring for the policy."""
    mesh = cfg.u0.mesh
    stepper = _ProximalStepper(mesh, cfg.p, cfg.delta, cfg.inner_tol, cfg.inner_max_iter)
    kernel = _nodal_kernel(cfg)
    threshold = cfg.resolved_blow_threshold()

    u = cfg.u0.copy()
    t = 0.0
    dt = cfg.dt0
    times, l2s, linfs, dirs, wgts = [0.0], [l2_norm(u)], [linf_norm(u)], \
        [dirichlet_energy(u, cfg.p, cfg.delta)], [weighted_pnorm(u, cfg.pot, cfg.cap, cfg.p)]
    fields = [u.values.copy()] if cfg.record_fields else None

    status = COMPLETED
    t_star: float | None = None
    smooth_streak = 0
    steps = 0
    while t < cfg.t_end * (1.0 - 1e-14):
        steps += 1
        if steps > cfg.max_steps:
            raise RuntimeError(f"step budget {cfg.max_steps} exhausted at t={t}")
        dt_try = min(dt, cfg.t_end - t)
        try:
            unew = step(u, cfg, dt_try, _stepper=stepper, _kernel=kernel)
            grew_too_fast = linf_norm(unew) > cfg.growth_limit * max(linf_norm(u), 1e-300)
        except StepRejected:
            unew, grew_too_fast = None, True
        if grew_too_fast:
            dt *= 0.5
            smooth_streak = 0
            if dt < cfg.dt_min:
                status = STEP_UNDERFLOW
                t_star = t
                break
            continue
        t += dt_try
        u = unew
        times.append(t)
        l2s.append(l2_norm(u))
        linfs.append(linf_norm(u))
        dirs.append(dirichlet_energy(u, cfg.p, cfg.delta))
        wgts.append(weighted_pnorm(u, cfg.pot, cfg.cap, cfg.p))
        if fields is not None:
            fields.append(u.values.copy())
        if linfs[-1] > threshold:
            status = BLOW_UP
            t_star = t
            break
        smooth_streak += 1
        if smooth_streak >= 3 and dt < cfg.dt0:
            dt = min(2.0 * dt, cfg.dt0)
            smooth_streak = 0

    return SimulationTrace(
        times=np.asarray(times), l2=np.asarray(l2s), linf=np.asarray(linfs),
        dirichlet=np.asarray(dirs), weighted=np.asarray(wgts),
        status=status, t_star=t_star, fields=fields,
    )


@dataclass
class EnergyReport:
    l2_initial_sq: float
    l2_final_sq: float
    dissipation_integral: float
    weighted_integral: float
    lhs: float
    rhs: float
    slack: float
    holds: bool


def energy_estimate_check(trace: SimulationTrace, mu: float, constant: float,
                          tol_disc: float = 0.05) -> EnergyReport:
    """Check |u(T)|^2 + (1 - mu/C) int int |grad u|^p <= |u0|^2 (1 + tol).

    Valid only in the regime mu/C < 1; refused otherwise.  Path integrals
    use the trapezoid rule on the recorded trace.
    """
    if not mu / constant < 1.0:
        raise ValueError(f"estimate void for mu/C >= 1 (mu={mu}, C={constant})")
    dissipation = float(np.trapezoid(trace.dirichlet, trace.times))
    weighted = float(np.trapezoid(trace.weighted, trace.times))
    l2_0 = float(trace.l2[0] ** 2)
    l2_t = float(trace.l2[-1] ** 2)
    lhs = l2_t + (1.0 - mu / constant) * dissipation
    rhs = l2_0 * (1.0 + tol_disc)
    return EnergyReport(
        l2_initial_sq=l2_0, l2_final_sq=l2_t, dissipation_integral=dissipation,
        weighted_integral=weighted, lhs=lhs, rhs=rhs, slack=rhs - lhs, holds=lhs <= rhs,
    )


def blow_up_time(t0: float, p: float) -> float:
    """Divergence time ((p-2) t0^(p-2))^(-1) of T' = T^(p-1), T(0)=t0; needs p > 2."""
    if not p > 2.0:
        raise ValueError(f"closed-form blow-up requires p > 2, got p={p}")
    if not t0 > 0:
        raise ValueError(f"initial value must be positive, got {t0}")
    return 1.0 / ((p - 2.0) * t0 ** (p - 2.0))


def time_factor(t0: float, p: float, t) -> float | np.ndarray:
    """Closed-form T(t) = t0 (1 - (p-2) t0^(p-2) t)^(-1/(p-2)) for 0 <= t < t*."""
    t_max = blow_up_time(t0, p)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t >= t_max):
        raise ValueError(f"t must lie in [0, {t_max}), got {t}")
    out = t0 * (1.0 - (p - 2.0) * t0 ** (p - 2.0) * t) ** (-1.0 / (p - 2.0))
    return float(out) if out.ndim == 0 else out


@dataclass
class SteadyProfile:
    success: bool
    profile: GridFunction | None
    residual_dual: float
    residual_nodal_inf: float
    iterations: int
    eigenvalue: float
    tol_used: float = 0.0
    message: str = ""


def _steady_residual(x: GridFunction, kernel: np.ndarray, p: float, mu: float, delta: float):
    """Weak residual of the steady equation in the lumped nodal calculus
    the time stepper uses (mass-lumped reaction with nodal kernel values)."""
    mesh = x.mesh
    react = kernel * np.abs(x.values) ** (p - 2.0) * x.values
    weak = energy_gradient(x, p, delta) + mesh.node_weights * (x.values - mu * react)
    weak[mesh.boundary_mask] = 0.0
    return weak


def steady_nodal_residual_inf(x: GridFunction, pot: Potential | None, cap: float,
                              p: float, mu: float, delta: float = 0.0) -> float:
    """Sup of the strong residual with nodal kernel values (the form the
    explicit reaction of the time stepper sees)."""
    mesh = x.mesh
    interior = ~mesh.boundary_mask
    kernel = np.ones(mesh.num_nodes) if pot is None else \
        potential_on_mesh(pot, mesh, where="nodes", cap=cap)
    rho = _steady_residual(x, kernel, p, mu, delta) / np.where(interior, mesh.node_weights, 1.0)
    return float(np.max(np.abs(rho[interior])))


def steady_profile_solve(pot: Potential | None, cap: float, p: float, mu: float,
                         mesh: Mesh, tol: float | None = None, max_iter: int = 4000,
                         eig: EigenPair | None = None, eig_tol: float = 1e-6,
                         delta: float = 0.0) -> SteadyProfile:
    """Positive solution of -div(|grad X|^(p-2) grad X) - mu W_cap X^(p-1) = -X.

    Requires p > 2 and mu above the first eigenvalue (the solvability
    regime).  The equation is posed in the same lumped nodal calculus as
    the time stepper's reaction, so profile(x) * T(t) is a sub-solution
    of the discrete dynamics, not only of the continuum problem.

    The solution is an index-1 saddle of the free energy
    J = E/p + |X|^2/2 - mu F/p, so plain iteration flees it; instead the
    ground state is found as the minimizer over the constraint set where
    E + |X|^2 = mu F (on which the amplitude of any direction has the
    closed form s^(p-2) = |Z|^2 / (mu F(Z) - E(Z)) and J reduces to
    (1/2 - 1/p) s^2 |Z|^2), by the same preconditioned projected descent
    as the eigen solver, followed by a damped Newton polish of the full
    residual.  Existence is only guaranteed abstractly, so divergence or
    positivity loss returns a failure status rather than raising.
    """
    if not p > 2.0:
        raise ValueError(f"steady separable profile requires p > 2, got p={p}")
    if eig is None:
        eig = first_eigenpair(pot, cap, p, mesh, tol=eig_tol, delta=delta)
    if not mu > eig.value:
        raise ValueError(f"requires mu > first eigenvalue {eig.value}, got mu={mu}")

    from .variational import stiffness_preconditioner

    _, lu = stiffness_preconditioner(mesh)
    interior = np.flatnonzero(~mesh.boundary_mask)
    mass = mesh.node_weights
    kernel = np.ones(mesh.num_nodes) if pot is None else \
        potential_on_mesh(pot, mesh, where="nodes", cap=cap)

    def lumped_weighted(z_vals: np.ndarray) -> float:
        return float(np.sum(mass * kernel * np.abs(z_vals) ** p))

    def amplitude(z: GridFunction):
        a = float(np.sum(mass * z.values**2))
        b = mu * lumped_weighted(z.values) - dirichlet_energy(z, p, delta)
        return a, b

    def constrained_point(z: GridFunction):
        a, b = amplitude(z)
        if b <= 0.0:
            return None
        s = (a / b) ** (1.0 / (p - 2.0))
        return GridFunction(mesh, s * z.values)

    def res_norm(gf):
        return dual_norm(mesh, _steady_residual(gf, kernel, p, mu, delta))

    z = eig.eigfun.copy()
    x = constrained_point(z)
    if x is None:
        return SteadyProfile(False, None, math.inf, math.inf, 0, eig.value,
                             message="eigenfunction not in the solvable cone")
    scale_ref = dual_norm(mesh, mass * x.values) \
        + abs(mu) * dual_norm(mesh, mass * kernel * np.abs(x.values) ** (p - 1.0))
    target = tol if tol is not None else 1e-8 * max(scale_ref, 1e-300)

    kappa = 2.0 / (p - 2.0)

    def nehari_value_grad(zf: GridFunction):
        a, b = amplitude(zf)
        if b <= 0.0:
            return math.inf, None
        val = a ** (kappa + 1.0) / b**kappa
        grad_a = 2.0 * mass * zf.values
        react = mass * kernel * np.abs(zf.values) ** (p - 2.0) * zf.values
        grad_b = p * (mu * react - energy_gradient(zf, p, delta))
        grad = (a / b) ** kappa * ((kappa + 1.0) * grad_a - kappa * (a / b) * grad_b)
        grad[mesh.boundary_mask] = 0.0
        return val, grad

    iterations = 0
    val, grad = nehari_value_grad(z)
    step = 1.0
    for iterations in range(1, max_iter + 1):
        x = constrained_point(z)
        rnorm = res_norm(x)
        if rnorm <= 50.0 * target:
            break
        direction = np.zeros(mesh.num_nodes)
        direction[interior] = -lu.solve(grad[interior])
        slope = float(np.dot(grad, direction))
        if slope >= 0.0:
            direction, slope = -grad, float(-np.dot(grad, grad))
        step = min(4.0 * step, 1.0)
        accepted = False
        for _ in range(60):
            tg = GridFunction(mesh, np.abs(z.values + step * direction))
            val_t, grad_t = nehari_value_grad(tg)
            if val_t <= val + 1e-4 * step * slope + 1e-14 * abs(val):
                z, val, grad = tg, val_t, grad_t
                # normalize against amplitude drift (objective is 0-homogeneous)
                nrm = float(np.sqrt(np.sum(mass * z.values**2)))
                z.values /= max(nrm, 1e-300)
                val, grad = nehari_value_grad(z)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break

    x = constrained_point(z)
    if x is None:
        return SteadyProfile(False, None, math.inf, math.inf, iterations, eig.value,
                             tol_used=target, message="left the solvable cone")
    rnorm = res_norm(x)

    # Newton polish of the full residual from the constrained minimizer
    stepper = _ProximalStepper(mesh, p, delta, tol=1e-10, max_iter=1)
    for polish in range(1, 41):
        if rnorm <= target:
            break
        weak = _steady_residual(x, kernel, p, mu, delta)
        react_diag = mass * (1.0 - mu * kernel * (p - 1.0) * np.abs(x.values) ** (p - 2.0))
        jac = stepper.energy_hessian(x) + sp.diags(react_diag)
        jsub = jac[np.ix_(interior, interior)].tocsc()
        try:
            direction = spla.splu(jsub).solve(-weak[interior])
        except RuntimeError:
            break
        stepsize, improved = 1.0, False
        for _ in range(40):
            trial = x.values.copy()
            trial[interior] += stepsize * direction
            tg = GridFunction(mesh, trial)
            rn = res_norm(tg)
            if rn < rnorm * (1.0 - 1e-4 * stepsize):
                x, rnorm, improved = tg, rn, True
                break
            stepsize *= 0.5
        iterations += 1
        if not improved:
            break

    if rnorm > target:
        return SteadyProfile(False, None, rnorm, math.inf, iterations, eig.value,
                             tol_used=target,
                             message=f"residual {rnorm:.3e} above target {target:.3e}")
    if np.any(x.values[interior] <= 0.0):
        return SteadyProfile(False, None, rnorm, math.inf, iterations, eig.value,
                             tol_used=target, message="positivity lost in the steady profile")
    nodal = steady_nodal_residual_inf(x, pot, cap, p, mu, delta)
    return SteadyProfile(True, x, rnorm, nodal, iterations, eig.value, tol_used=target)


class NoAdmissibleEpsilon(RuntimeError):
    """u0 vanishes somewhere the steady profile is positive."""


@dataclass
class Subsolution:
    """Separable lower barrier profile(x) * T(t) with T(0) = eps."""

    profile: GridFunction
    eps: float
    p: float
    t_max: float

    def value_at(self, t: float) -> np.ndarray:
        return self.profile.values * time_factor(self.eps, self.p, t)


def build_subsolution(x: GridFunction, eps: float, p: float, u0: GridFunction,
                      grid_factor: float = 0.99, max_levels: int = 4000) -> Subsolution:
    """Largest eps' <= eps on a geometric grid with eps' * X <= u0 nodewise."""
    if not p > 2.0:
        raise ValueError(f"separable sub-solution requires p > 2, got p={p}")
    if not 0.0 < grid_factor < 1.0:
        raise ValueError("grid factor must lie in (0, 1)")
    if x.mesh is not u0.mesh:
        raise ValueError("steady profile and initial datum live on different meshes")
    interior = ~x.mesh.boundary_mask
    xv, uv = x.values[interior], u0.values[interior]
    if np.any(xv <= 0.0):
        raise ValueError("steady profile must be positive in the interior")
    ratio = float(np.min(uv / xv))
    if ratio <= 0.0:
        raise NoAdmissibleEpsilon("initial datum vanishes where the profile is positive")
    level = float(eps)
    for _ in range(max_levels):
        if level <= ratio * (1.0 + 1e-13):
            return Subsolution(profile=x, eps=level, p=p,
                               t_max=blow_up_time(level, p))
        level *= grid_factor
    raise NoAdmissibleEpsilon(f"no admissible epsilon above {level}")


@dataclass
class ComparisonReport:
    passed: bool
    worst_violation: float
    worst_time: float
    times_checked: int
    tolerance_at_worst: float


def comparison_check(fields, times, sub: Subsolution, u0_linf: float,
                     steady_residual_inf: float = 0.0, rel_tol: float = 1e-6,
                     horizon_frac: float = 0.95) -> ComparisonReport:
    """Nodewise check u(x, t) >= sub(x, t) - tol at every recorded time.

    The tolerance is rel_tol * |u0|_inf plus the steady residual
    propagated through the separable identity, which integrates to
    (T(t) - eps) * |residual|_inf.
    """
    times = np.asarray(times, dtype=float)
    if len(fields) != times.size:
        raise ValueError(f"{len(fields)} fields for {times.size} times")
    horizon = horizon_frac * sub.t_max
    worst, worst_t, worst_tol = -math.inf, 0.0, 0.0
    checked = 0
    nn = sub.profile.mesh.num_nodes
    for u_vals, t in zip(fields, times):
        if t > horizon:
            break
        u_vals = u_vals.values if isinstance(u_vals, GridFunction) else np.asarray(u_vals)
        if u_vals.shape != (nn,):
            raise ValueError("field/mesh size mismatch in comparison check")
        tval = time_factor(sub.eps, sub.p, t)
        tol = rel_tol * u0_linf + steady_residual_inf * (tval - sub.eps)
        violation = float(np.max(sub.profile.values * tval - u_vals)) - tol
        checked += 1
        if violation > worst:
            worst, worst_t, worst_tol = violation, float(t), tol
    if checked == 0:
        raise ValueError("no recorded times inside the sub-solution horizon")
    return ComparisonReport(passed=worst <= 0.0, worst_violation=worst,
                            worst_time=worst_t, times_checked=checked,
                            tolerance_at_worst=worst_tol)
