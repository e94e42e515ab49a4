"""Run configuration: schema, validation, and echoing of defaults.

Configurations are YAML (or JSON) key-value documents.  Unknown keys are
rejected, defaults are filled in and echoed back through the `resolved`
dictionary, which is also embedded as comment lines in every output file
for provenance.

The reaction coefficient accepts three spellings: a plain number, a
multiple of the sharp constant such as "0.9C" (resolved while parsing),
or a multiple of the first eigenvalue such as "1.2lambda" (resolved at
run time, once the eigenvalue for the configured truncation is known).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import Ball, Domain, StarShaped2D
from .potentials import Potential, PotentialKind, kind_from_name, make_potential, optimal_constant
from .profiles import PROFILE_NAMES


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


SCENARIOS = ("eigen", "evolve", "sweep-mu", "sweep-N", "potential-dump", "hardy-fuzz")

_TOP_KEYS = {
    "scenario", "domain", "potential", "mesh", "N", "N_grid", "mu", "mu_grid",
    "u0", "t_end", "dt0", "blow_threshold", "dt_min", "delta", "eig_tol",
    "fuzz_count", "fuzz_cap", "floor_margin", "subsolution", "dump_mesh",
    "output_dir", "seed", "workers",
}

_DEFAULTS = {
    "N": 1000.0,
    "t_end": 10.0,
    "dt0": 0.01,
    "blow_threshold": None,
    "dt_min": 1e-12,
    "delta": 0.0,
    "eig_tol": 1e-8,
    "fuzz_count": 500,
    "fuzz_cap": 1e12,
    "floor_margin": 1e-3,
    "subsolution": False,
    "dump_mesh": False,
    "output_dir": "out",
    "seed": 0,
    "workers": 1,
}


@dataclass(frozen=True)
class MuSpec:
    """Reaction coefficient, possibly deferred to a run-time eigenvalue."""

    raw: str
    absolute: float | None = None
    lambda_multiple: float | None = None

    @property
    def deferred(self) -> bool:
        return self.absolute is None


def parse_mu(value, pot: Potential) -> MuSpec:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return MuSpec(raw=str(value), absolute=float(value))
    if not isinstance(value, str):
        raise ConfigError(f"mu must be a number or a string, got {value!r}")
    text = value.strip()
    lowered = text.lower()
    for suffix in ("lambda", "l"):
        if lowered.endswith(suffix):
            head = text[: -len(suffix)].strip()
            try:
                mult = float(head) if head else 1.0
            except ValueError:
                raise ConfigError(f"cannot parse mu specification {value!r}") from None
            return MuSpec(raw=text, lambda_multiple=mult)
    if lowered.endswith("c"):
        head = text[:-1].strip()
        try:
            mult = float(head) if head else 1.0
        except ValueError:
            raise ConfigError(f"cannot parse mu specification {value!r}") from None
        return MuSpec(raw=text, absolute=mult * optimal_constant(pot))
    try:
        return MuSpec(raw=text, absolute=float(text))
    except ValueError:
        raise ConfigError(f"cannot parse mu specification {value!r}") from None


@dataclass
class RunConfig:
    scenario: str
    domain: Domain
    pot: Potential
    resolution: int
    angular_resolution: int | None
    grading: float
    cap: float
    cap_grid: list[float] | None
    mu: MuSpec | None
    mu_grid: list[MuSpec] | None
    u0_profile: str
    u0_scale: float
    t_end: float
    dt0: float
    blow_threshold: float | None
    dt_min: float
    delta: float
    eig_tol: float
    fuzz_count: int
    fuzz_cap: float
    floor_margin: float
    subsolution: bool
    dump_mesh: bool
    output_dir: Path
    seed: int
    workers: int
    resolved: dict = field(repr=False, default_factory=dict)

    def grade_ends(self) -> tuple[bool, bool]:
        """(toward origin, toward boundary) per the kernel's singular set."""
        kind = self.pot.kind
        origin = kind in (PotentialKind.ORIGIN_LOG, PotentialKind.STAR_HARDY)
        boundary = kind in (PotentialKind.DIST_POWER, PotentialKind.DIST_LOG,
                            PotentialKind.STAR_HARDY)
        return origin, boundary


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    _require(not unknown, f"unknown key(s) in {where}: {', '.join(unknown)}")


def _number(section: dict, key: str, where: str, default=None, positive=False):
    val = section.get(key, default)
    if val is None:
        return None
    _require(isinstance(val, (int, float)) and not isinstance(val, bool),
             f"{where}.{key} must be a number, got {val!r}")
    _require(not positive or val > 0, f"{where}.{key} must be positive, got {val}")
    return float(val)


def _build_domain(section) -> Domain:
    _require(isinstance(section, dict), "domain must be a mapping")
    kind = section.get("kind")
    _require(kind in ("ball", "star"), f"domain.kind must be 'ball' or 'star', got {kind!r}")
    if kind == "ball":
        _check_keys(section, {"kind", "dim", "radius"}, "domain")
        dim = section.get("dim", 2)
        _require(isinstance(dim, int) and dim >= 2, f"domain.dim must be an integer >= 2, got {dim!r}")
        radius = _number(section, "radius", "domain", default=1.0, positive=True)
        try:
            return Ball(dim=dim, radius=radius)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    _check_keys(section, {"kind", "phi"}, "domain")
    phi_spec = section.get("phi")
    if isinstance(phi_spec, dict):
        _check_keys(phi_spec, {"base", "amplitude", "frequency", "samples"}, "domain.phi")
        base = _number(phi_spec, "base", "domain.phi", default=1.0, positive=True)
        amp = _number(phi_spec, "amplitude", "domain.phi", default=0.0)
        freq = phi_spec.get("frequency", 1)
        _require(isinstance(freq, int) and freq >= 0, "domain.phi.frequency must be an integer >= 0")
        samples = phi_spec.get("samples", 256)
        _require(isinstance(samples, int) and samples >= 8, "domain.phi.samples must be an integer >= 8")
        th = np.arange(samples) * (2.0 * math.pi / samples)
        phi = base + amp * np.cos(freq * th)
    elif isinstance(phi_spec, (list, tuple)):
        phi = np.asarray(phi_spec, dtype=float)
    else:
        raise ConfigError("domain.phi must be a list of samples or a generator mapping")
    try:
        return StarShaped2D(phi=phi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_potential(section, domain: Domain) -> Potential:
    _require(isinstance(section, dict), "potential must be a mapping")
    _check_keys(section, {"kind", "p", "n", "D", "R"}, "potential")
    _require("kind" in section, "potential.kind is required")
    try:
        kind = kind_from_name(section["kind"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    p = _number(section, "p", "potential", default=None)
    d_scale = _number(section, "D", "potential", positive=True)
    r_scale = _number(section, "R", "potential", positive=True)
    n_domain = domain.dim if isinstance(domain, Ball) else 2
    n = section.get("n", n_domain)
    _require(isinstance(n, int) and n == n_domain,
             f"potential.n must match the domain dimension {n_domain}, got {n!r}")
    try:
        return make_potential(kind, domain, p=p, D=d_scale, R=r_scale)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _grid_of_numbers(value, where: str) -> list[float]:
    _require(isinstance(value, (list, tuple)) and len(value) > 0, f"{where} must be a nonempty list")
    out = []
    for item in value:
        _require(isinstance(item, (int, float)) and not isinstance(item, bool),
                 f"{where} entries must be numbers, got {item!r}")
        _require(item > 0, f"{where} entries must be positive, got {item}")
        out.append(float(item))
    return out


def build_run_config(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Validate a configuration document (plus flat overrides) into a RunConfig."""
    _require(isinstance(doc, dict), "configuration root must be a mapping")
    doc = dict(doc)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("resolution", "angular_resolution", "grading"):
            doc.setdefault("mesh", {})
            _require(isinstance(doc["mesh"], dict), "mesh must be a mapping")
            doc["mesh"] = dict(doc["mesh"])
            doc["mesh"][key] = value
        else:
            doc[key] = value

    _check_keys(doc, _TOP_KEYS, "configuration")
    scenario = doc.get("scenario")
    _require(scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    _require("domain" in doc, "domain section is required")
    _require("potential" in doc, "potential section is required")
    domain = _build_domain(doc["domain"])
    pot = _build_potential(doc["potential"], domain)

    mesh_section = doc.get("mesh", {})
    _require(isinstance(mesh_section, dict), "mesh must be a mapping")
    _check_keys(mesh_section, {"resolution", "angular_resolution", "grading"}, "mesh")
    resolution = mesh_section.get("resolution", 400)
    _require(isinstance(resolution, int) and resolution >= 8,
             f"mesh.resolution must be an integer >= 8, got {resolution!r}")
    angular = mesh_section.get("angular_resolution")
    _require(angular is None or (isinstance(angular, int) and angular >= 8),
             f"mesh.angular_resolution must be an integer >= 8, got {angular!r}")
    grading = _number(mesh_section, "grading", "mesh", default=2.0)
    _require(grading >= 1.0, f"mesh.grading must be >= 1, got {grading}")

    cap = _number(doc, "N", "configuration", default=_DEFAULTS["N"], positive=True)
    cap_grid = None
    if "N_grid" in doc:
        cap_grid = _grid_of_numbers(doc["N_grid"], "N_grid")
    mu = parse_mu(doc["mu"], pot) if "mu" in doc else None
    mu_grid = None
    if "mu_grid" in doc:
        raw = doc["mu_grid"]
        _require(isinstance(raw, (list, tuple)) and len(raw) > 0, "mu_grid must be a nonempty list")
        mu_grid = [parse_mu(item, pot) for item in raw]

    u0_section = doc.get("u0", {"profile": "distance"})
    _require(isinstance(u0_section, dict), "u0 must be a mapping")
    _check_keys(u0_section, {"profile", "scale"}, "u0")
    u0_profile = u0_section.get("profile", "distance")
    valid_profiles = PROFILE_NAMES + ("eigenfunction",)
    _require(u0_profile in valid_profiles,
             f"u0.profile must be one of {valid_profiles}, got {u0_profile!r}")
    u0_scale = _number(u0_section, "scale", "u0", default=1.0)
    _require(u0_scale != 0.0, "u0.scale must be nonzero")

    def setting(key, positive=False):
        return _number(doc, key, "configuration", default=_DEFAULTS[key], positive=positive)

    t_end = setting("t_end", positive=True)
    dt0 = setting("dt0", positive=True)
    blow = _number(doc, "blow_threshold", "configuration", default=None, positive=True)
    dt_min = setting("dt_min", positive=True)
    delta = setting("delta")
    _require(delta >= 0.0, "delta must be nonnegative")
    _require(pot.p >= 2.0 or delta > 0.0,
             f"p = {pot.p} < 2 requires a positive regularization delta")
    eig_tol = setting("eig_tol", positive=True)
    fuzz_count = doc.get("fuzz_count", _DEFAULTS["fuzz_count"])
    _require(isinstance(fuzz_count, int) and fuzz_count > 0, "fuzz_count must be a positive integer")
    fuzz_cap = setting("fuzz_cap", positive=True)
    floor_margin = setting("floor_margin", positive=True)
    subsolution = doc.get("subsolution", _DEFAULTS["subsolution"])
    _require(isinstance(subsolution, bool), "subsolution must be a boolean")
    dump_mesh = doc.get("dump_mesh", _DEFAULTS["dump_mesh"])
    _require(isinstance(dump_mesh, bool), "dump_mesh must be a boolean")
    output_dir = doc.get("output_dir", _DEFAULTS["output_dir"])
    _require(isinstance(output_dir, (str, Path)), "output_dir must be a path")
    seed = doc.get("seed", _DEFAULTS["seed"])
    _require(isinstance(seed, int), "seed must be an integer")
    workers = doc.get("workers", _DEFAULTS["workers"])
    _require(isinstance(workers, int) and workers >= 1, "workers must be an integer >= 1")

    if scenario == "sweep-mu":
        _require(mu_grid is not None, "scenario sweep-mu requires mu_grid")
    if scenario == "sweep-N":
        _require(cap_grid is not None, "scenario sweep-N requires N_grid")
    if scenario == "evolve":
        _require(mu is not None, "scenario evolve requires mu")

    resolved = {
        "scenario": scenario,
        "domain": _echo_domain(domain),
        "potential": {
            "kind": pot.kind.value, "p": pot.p, "n": pot.n,
            "D": pot.D, "R": pot.R, "m": pot.m,
        },
        "mesh": {"resolution": resolution, "angular_resolution": angular, "grading": grading},
        "N": cap, "N_grid": cap_grid,
        "mu": None if mu is None else (mu.raw if mu.deferred else mu.absolute),
        "mu_grid": None if mu_grid is None else
            [m.raw if m.deferred else m.absolute for m in mu_grid],
        "u0": {"profile": u0_profile, "scale": u0_scale},
        "t_end": t_end, "dt0": dt0, "blow_threshold": blow, "dt_min": dt_min,
        "delta": delta, "eig_tol": eig_tol, "fuzz_count": fuzz_count,
        "fuzz_cap": fuzz_cap, "floor_margin": floor_margin,
        "subsolution": subsolution, "dump_mesh": dump_mesh,
        "output_dir": str(output_dir), "seed": seed, "workers": workers,
    }

    return RunConfig(
        scenario=scenario, domain=domain, pot=pot, resolution=resolution,
        angular_resolution=angular, grading=grading, cap=cap, cap_grid=cap_grid,
        mu=mu, mu_grid=mu_grid, u0_profile=u0_profile, u0_scale=u0_scale,
        t_end=t_end, dt0=dt0, blow_threshold=blow, dt_min=dt_min, delta=delta,
        eig_tol=eig_tol, fuzz_count=fuzz_count, fuzz_cap=fuzz_cap,
        floor_margin=floor_margin, subsolution=subsolution, dump_mesh=dump_mesh,
        output_dir=Path(output_dir), seed=seed, workers=workers, resolved=resolved,
    )


def _echo_domain(domain: Domain) -> dict:
    if isinstance(domain, Ball):
        return {"kind": "ball", "dim": domain.dim, "radius": domain.radius}
    return {"kind": "star", "samples": int(domain.num_samples),
            "phi_min": float(domain.phi.min()), "phi_max": float(domain.phi.max()),
            "convex": bool(domain.convexity_assumed)}


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Load and validate a YAML/JSON configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        doc = {}
    return build_run_config(doc, overrides)


def flatten_resolved(resolved: dict, prefix: str = "") -> list[tuple[str, object]]:
    """Flatten the echo dictionary to sorted dotted key/value pairs."""
    items: list[tuple[str, object]] = []
    for key in sorted(resolved):
        value = resolved[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(flatten_resolved(value, prefix=f"{name}."))
        else:
            items.append((name, value))
    return items
