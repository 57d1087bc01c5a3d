"""Intracellular ATP network: glycolysis, aerobic lump, fermentation, consumption.

Rates follow mass action with orders equal to the stoichiometric coefficients
of the substrates (O2 enters the aerobic rate to first order). Glucose and
oxygen are clamped to their supply values after every substep.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, replace

import numba as nb
import numpy as np

from .core import IntegrationError, MetabolicParams

SPECIES = ("glu", "nad_plus", "nadh", "pyr", "lac", "o2", "atp")
GLU, NAD, NADH, PYR, LAC, O2, ATP = range(7)
REACTIONS = ("glycolysis", "aerobic", "fermentation", "consumption")

# rows: species, columns: reactions
STOICHIOMETRY = np.array(
    [
        # glyc  aer  ferm  cons
        [-1.0, 0.0, 0.0, 0.0],    # glu
        [-2.0, 1.0, 1.0, 0.0],    # nad+
        [2.0, -1.0, -1.0, 0.0],   # nadh
        [2.0, -1.0, -1.0, 0.0],   # pyr
        [0.0, 0.0, 1.0, 0.0],     # lac
        [0.0, -3.0, 0.0, 0.0],    # o2
        [2.0, 17.0, 0.0, -1.0],   # atp
    ]
)


@dataclass(frozen=True)
class MetabolicState:
    glu: float = 0.0
    nad_plus: float = 0.0
    nadh: float = 0.0
    pyr: float = 0.0
    lac: float = 0.0
    o2: float = 0.0
    atp: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a) -> MetabolicState:
        return cls(*(float(x) for x in a))

    def replace(self, **kw) -> MetabolicState:
        return replace(self, **kw)


@dataclass(frozen=True)
class ReactionRates:
    r_glyc: float
    r_aer: float
    r_ferm: float
    r_cons: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def initial_state(glu_supply, o2_supply, nad_total, atp) -> MetabolicState:
    """Default start: supplied nutrients, oxidised NAD pool, no pyruvate or lactate."""
    return MetabolicState(glu=glu_supply, nad_plus=nad_total, o2=o2_supply, atp=atp)


def _k_array(k: MetabolicParams) -> np.ndarray:
    return np.array([k.k_glu, k.k_aer, k.k_ana, k.k_ene], dtype=float)


@nb.njit(cache=True, inline="always")
def _derivative(y, k, out):
    r_glyc = k[0] * y[0] * y[1] * y[1]
    r_aer = k[1] * y[3] * y[2] * y[5]
    r_ferm = k[2] * y[3] * y[2]
    r_cons = k[3] * y[6]
    flux = r_aer + r_ferm
    out[0] = -r_glyc
    out[1] = -2.0 * r_glyc + flux
    out[2] = 2.0 * r_glyc - flux
    out[3] = 2.0 * r_glyc - flux
    out[4] = r_ferm
    out[5] = -3.0 * r_aer
    out[6] = 2.0 * r_glyc + 17.0 * r_aer - r_cons


@nb.njit(cache=True)
def rk4_rows(states, k, dt, nsub, glu_clamp, o2_clamp):
    """Advance every row of ``states`` by ``dt`` with ``nsub`` RK4 substeps, in place.

    Returns (row, species) of the first non-finite value, or (-1, -1).
    """
    h = dt / nsub
    k1 = np.empty(7)
    k2 = np.empty(7)
    k3 = np.empty(7)
    k4 = np.empty(7)
    tmp = np.empty(7)
    for r in range(states.shape[0]):
        y = states[r]
        for _ in range(nsub):
            _derivative(y, k, k1)
            for i in range(7):
                tmp[i] = y[i] + 0.5 * h * k1[i]
            _derivative(tmp, k, k2)
            for i in range(7):
                tmp[i] = y[i] + 0.5 * h * k2[i]
            _derivative(tmp, k, k3)
            for i in range(7):
                tmp[i] = y[i] + h * k3[i]
            _derivative(tmp, k, k4)
            for i in range(7):
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if y[i] < 0.0:
                    y[i] = 0.0
            if glu_clamp >= 0.0:
                y[0] = glu_clamp
            if o2_clamp >= 0.0:
                y[5] = o2_clamp
        for i in range(7):
            if not np.isfinite(y[i]):
                return r, i
    return -1, -1


def n_substeps(dt: float, substep: float) -> int:
    # tolerate float noise such as 0.1 / 0.01 = 10.000000000000002
    return max(1, math.ceil(dt / substep - 1e-9))


def reaction_rates(s: MetabolicState, k: MetabolicParams) -> ReactionRates:
    return ReactionRates(
        r_glyc=k.k_glu * s.glu * s.nad_plus**2,
        r_aer=k.k_aer * s.pyr * s.nadh * s.o2,
        r_ferm=k.k_ana * s.pyr * s.nadh,
        r_cons=k.k_ene * s.atp,
    )


def apply_stoichiometry(s: MetabolicState, rates: ReactionRates, dt: float = 1.0) -> np.ndarray:
    """Change in each species produced by ``rates`` acting for ``dt`` (the derivative at dt=1)."""
    return STOICHIOMETRY @ rates.as_array() * dt


def integrate_array(states, k: MetabolicParams, dt, substep, glu_supply=-1.0, o2_supply=-1.0):
    """In-place RK4 integration of an (n, 7) state array; negative supply disables a clamp."""
    row, sp = rk4_rows(states, _k_array(k), float(dt), n_substeps(dt, substep),
                       float(glu_supply), float(o2_supply))
    if row >= 0:
        raise IntegrationError(f"non-finite {SPECIES[sp]} after integration (row {row})")
    return states


def integrate(s: MetabolicState, k: MetabolicParams, dt: float, substep: float,
              glu_supply: float | None = None, o2_supply: float | None = None) -> MetabolicState:
    """Integrate one cell over ``dt``; glucose and O2 stay clamped at their supply values.

    Without explicit supplies the clamps hold the state's current glu and o2.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = s.as_array()[None, :].copy()
    glu = s.glu if glu_supply is None else glu_supply
    o2 = s.o2 if o2_supply is None else o2_supply
    integrate_array(y, k, dt, substep, glu, o2)
    return MetabolicState.from_array(y[0])


def network_table() -> str:
    """Plain-text stoichiometry table of the reaction network."""
    width = max(map(len, SPECIES)) + 2
    head = "reaction".ljust(14) + "".join(s.rjust(width) for s in SPECIES)
    lines = [head, "-" * len(head)]
    for j, name in enumerate(REACTIONS):
        row = "".join(f"{STOICHIOMETRY[i, j]:+g}".rjust(width) for i in range(len(SPECIES)))
        lines.append(name.ljust(14) + row)
    return "\n".join(lines)
