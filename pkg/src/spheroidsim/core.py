"""Shared domain types, configuration and parameter space.

Units are fixed conventions throughout the package: lengths in µm, time in
minutes, viscosity in Pa·s, forces in model force units (velocity in µm/min is
force / (6πRη)), metabolite and ATP levels in abstract model units.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


class IntegrationError(ArithmeticError):
    """Metabolic integration produced a non-finite state."""


class ConditioningError(ArithmeticError):
    """A covariance matrix could not be factorised even with added jitter."""


class PopulationCapError(RuntimeError):
    """The simulated population exceeded the configured hard cap."""


class CellState(IntEnum):
    PROLIFERATING = 0
    QUIESCENT = 1
    APOPTOTIC = 2


# collagen density (mg/ml) -> dynamic viscosity (Pa·s)
COLLAGEN_VISCOSITY = {2.5: 7.96, 4.0: 18.42, 6.0: 39.15}

PARAMETER_NAMES = (
    "k_glu", "k_aer", "k_ana", "k_ene", "k_prolif", "atp_prolif", "atp_death",
)
CALIBRATED = ("k_glu", "k_ene", "k_prolif", "atp_prolif")


def eta_for_density(density) -> float:
    """Viscosity of the collagen gel for a density label (mg/ml)."""
    try:
        key = float(str(density).lower().replace("mg/ml", "").strip())
    except ValueError:
        raise ConfigError(f"unknown collagen density label {density!r}") from None
    if key not in COLLAGEN_VISCOSITY:
        raise ConfigError(
            f"unknown collagen density {density!r}; "
            f"expected one of {sorted(COLLAGEN_VISCOSITY)} mg/ml"
        )
    return COLLAGEN_VISCOSITY[key]


@dataclass(frozen=True)
class Bound:
    name: str
    low: float
    high: float
    fixed: float | None = None

    @property
    def is_fixed(self) -> bool:
        return self.fixed is not None


# Prior support of the calibrated parameters; the others are held fixed.
_PRIORS = {
    "k_glu": (5e-16, 1e-11),
    "k_ene": (3e-5, 0.1),
    "k_prolif": (3.5e-4, 9e-4),
    "atp_prolif": (700.0, 1200.0),
}
_FIXED = {"k_aer": 5e-12, "k_ana": 5e-12, "atp_death": 500.0}
# Exploration ranges for the sensitivity sweep; fixed values sit at the midpoints.
_EXPLORATION = {
    **_PRIORS,
    "k_aer": (0.0, 1e-11),
    "k_ana": (0.0, 1e-11),
    "atp_death": (300.0, 700.0),
}


def parameter_bounds() -> list[Bound]:
    """Prior support in the fixed parameter order; fixed entries have low == high."""
    out = []
    for name in PARAMETER_NAMES:
        if name in _FIXED:
            v = _FIXED[name]
            out.append(Bound(name, v, v, fixed=v))
        else:
            out.append(Bound(name, *_PRIORS[name]))
    return out


def exploration_bounds(names=PARAMETER_NAMES) -> np.ndarray:
    """(J, 2) array of [low, high] used for sweeps and Sobol analysis."""
    return np.array([_EXPLORATION[n] for n in names], dtype=float)


def prior_bounds(names=CALIBRATED) -> np.ndarray:
    return np.array([_PRIORS[n] for n in names], dtype=float)


@dataclass(frozen=True)
class MechanicalParams:
    c_cca: float = 7.2
    c_ccr: float = 380.0
    radius: float = 6.0
    adhesion_radius: float = 7.5
    eta: float = 39.15

    def __post_init__(self):
        for name in ("c_cca", "c_ccr"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("radius", "adhesion_radius", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.adhesion_radius <= self.radius:
            raise ConfigError("adhesion_radius must exceed radius")

    @property
    def drag(self) -> float:
        """Stokes drag coefficient 6πRη."""
        return 6.0 * np.pi * self.radius * self.eta

    @property
    def adhesion_range(self) -> float:
        """Pair distance below which two equal cells adhere (R_A of each cell summed)."""
        return 2.0 * self.adhesion_radius

    @property
    def contact_range(self) -> float:
        return 2.0 * self.radius


@dataclass(frozen=True)
class MetabolicParams:
    k_glu: float = 0.66e-11
    k_aer: float = 5e-12
    k_ana: float = 5e-12
    k_ene: float = 0.033

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")


@dataclass(frozen=True)
class PhenotypeParams:
    k_prolif: float = 0.00061
    atp_prolif: float = 1040.0
    atp_death: float = 500.0

    def __post_init__(self):
        if self.k_prolif < 0:
            raise ConfigError("k_prolif must be non-negative")
        if not self.atp_death < self.atp_prolif:
            raise ConfigError("atp_death must be below atp_prolif")


@dataclass(frozen=True)
class ParameterVector:
    metabolic: MetabolicParams = field(default_factory=MetabolicParams)
    phenotype: PhenotypeParams = field(default_factory=PhenotypeParams)

    def as_array(self) -> np.ndarray:
        d = {**asdict(self.metabolic), **asdict(self.phenotype)}
        return np.array([d[n] for n in PARAMETER_NAMES], dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAMETER_NAMES, self.as_array().tolist()))

    @classmethod
    def from_array(cls, values) -> ParameterVector:
        values = [float(v) for v in values]
        if len(values) != len(PARAMETER_NAMES):
            raise ConfigError(f"expected {len(PARAMETER_NAMES)} parameter values")
        return cls.from_dict(dict(zip(PARAMETER_NAMES, values)))

    @classmethod
    def from_dict(cls, d) -> ParameterVector:
        unknown = set(d) - set(PARAMETER_NAMES)
        if unknown:
            raise ConfigError(f"unknown parameters: {sorted(unknown)}")
        base = cls().as_dict()
        base.update({k: float(v) for k, v in d.items()})
        return cls(
            MetabolicParams(*(base[n] for n in PARAMETER_NAMES[:4])),
            PhenotypeParams(*(base[n] for n in PARAMETER_NAMES[4:])),
        )

    def with_values(self, **kw) -> ParameterVector:
        d = self.as_dict()
        d.update(kw)
        return ParameterVector.from_dict(d)


# Calibrated parameter sets for the three spheroid size groups.
GROUP_PARAMETERS = {
    "large": dict(k_glu=0.66e-11, k_aer=5e-12, k_ana=5e-12, k_ene=0.033,
                  k_prolif=0.00061, atp_prolif=1040.0, atp_death=500.0),
    "medium": dict(k_glu=0.66e-11, k_aer=5e-12, k_ana=5e-12, k_ene=0.065,
                   k_prolif=0.00057, atp_prolif=1025.0, atp_death=500.0),
    "small": dict(k_glu=0.54e-11, k_aer=5e-12, k_ana=5e-12, k_ene=0.084,
                  k_prolif=0.0005, atp_prolif=1050.0, atp_death=500.0),
}


def group_parameters(group: str) -> ParameterVector:
    try:
        return ParameterVector.from_dict(GROUP_PARAMETERS[group])
    except KeyError:
        raise ConfigError(f"unknown group {group!r}") from None


@dataclass(frozen=True)
class SimConfig:
    """Run settings. ``collagen_density`` selects the drag viscosity."""

    duration: float = 7 * 1440.0
    mechanics_dt: float = 0.1
    metabolic_substep: float = 0.01
    phenotype_dt: float = 6.0
    snapshot_interval: float = 1440.0
    domain_half_extent: float = 1000.0
    collagen_density: float = 6.0
    initial_cells: int = 1
    initial_spread: float = 0.0
    seed: int = 0
    locomotion_scale: float = 1.0
    # mean run length of a locomotive force before it is redrawn
    persistence_time: float = 0.1
    population_cap: int = 50_000
    # nutrient supply and the internal metabolite unit system
    glu_supply: float = 1.6e5
    o2_supply: float = 1e10
    nad_total: float = 1000.0
    initial_atp: float | None = None
    c_cca: float = 7.2
    c_ccr: float = 380.0
    radius: float = 6.0
    adhesion_radius: float = 7.5

    def __post_init__(self):
        if not self.duration >= 0:
            raise ConfigError("duration must be non-negative")
        if not 0 < self.metabolic_substep <= self.mechanics_dt <= self.phenotype_dt:
            raise ConfigError(
                "timesteps must satisfy 0 < metabolic_substep <= mechanics_dt <= phenotype_dt"
            )
        if not 0.0 <= self.locomotion_scale <= 1.0:
            raise ConfigError("locomotion_scale must lie in [0, 1]")
        if self.initial_cells < 0 or self.population_cap < 1:
            raise ConfigError("initial_cells must be >= 0 and population_cap >= 1")
        if self.domain_half_extent <= 0 or self.persistence_time <= 0:
            raise ConfigError("domain_half_extent and persistence_time must be positive")
        if self.snapshot_interval <= 0:
            raise ConfigError("snapshot_interval must be positive")
        for name, num, den in (
            ("phenotype_dt / mechanics_dt", self.phenotype_dt, self.mechanics_dt),
            ("snapshot_interval / phenotype_dt", self.snapshot_interval, self.phenotype_dt),
        ):
            ratio = num / den
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ConfigError(f"{name} must be a whole number, got {ratio:g}")
        eta_for_density(self.collagen_density)

    @property
    def eta(self) -> float:
        return eta_for_density(self.collagen_density)

    def mechanical(self) -> MechanicalParams:
        return MechanicalParams(self.c_cca, self.c_ccr, self.radius,
                                self.adhesion_radius, self.eta)

    def replace(self, **kw) -> SimConfig:
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> SimConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown simulation fields: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if v is None:
                kw[k] = None
            elif k in ("initial_cells", "seed", "population_cap"):
                kw[k] = int(v)
            else:
                try:
                    kw[k] = float(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"field {k!r}: expected a number, got {v!r}") from None
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def dump_config(config: SimConfig, params: ParameterVector | None = None) -> str:
    doc = {"simulation": config.as_dict()}
    if params is not None:
        doc["parameters"] = params.as_dict()
    return yaml.safe_dump(doc, sort_keys=False)


def parse_config(text: str, source: str = "<string>"):
    """Parse a config document into ``(SimConfig, ParameterVector | None)``."""
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}: malformed config{where}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    unknown = set(doc) - {"simulation", "parameters"}
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
    try:
        config = SimConfig.from_dict(doc.get("simulation") or {})
        params = doc.get("parameters")
        params = None if params is None else ParameterVector.from_dict(params)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return config, params


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def save_config(path, config: SimConfig, params: ParameterVector | None = None):
    Path(path).write_text(dump_config(config, params))
