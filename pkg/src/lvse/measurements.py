"""Synthesis of the per-timestep measurement vector.

Real measurements are power-flow truth plus clamped Gaussian noise whose 3-sigma
band equals the device's maximum tolerated error. Every prosumer without a
smart meter gets a pseudo (P, Q) pair, and the slack voltage is passed through
as a tight pseudo measurement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .allocation import MeasurementSpec, Quantity
from .grid import GridError, GridTopology, Prosumer
from .h0 import H0Profile
from .powerflow import PowerFlowSolution

#: Smallest reference magnitude (pu) for relative errors on P, Q and I.
MIN_REFERENCE_PU = 1e-4
HOURS_PER_YEAR = 8760.0


@dataclass(frozen=True)
class Measurement:
    quantity: Quantity
    element: str
    value: float  # per unit; injections in generator convention
    sigma: float  # per unit
    origin: str = "real"  # "real" or "pseudo"
    end: str | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"{self.quantity.value} at {self.location}: sigma must be positive")
        if self.origin not in ("real", "pseudo"):
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.quantity.value, self.element, self.end or "")

    @property
    def location(self) -> str:
        return f"{self.element}@{self.end}" if self.end else self.element


@dataclass(frozen=True)
class PseudoConfig:
    cos_phi: float = 0.95
    sigma_load_rel: float = 0.5 / 3
    sigma_pv_rel: float = 0.2 / 3
    sigma_floor_frac: float = 0.1  # of the prosumer's mean pseudo power
    sigma_min_kw: float = 0.01
    sigma_slack_v_rel: float = 0.001
    h0_path: str | None = None
    pv_reference: str = "max_installed"

    def __post_init__(self):
        if not 0 < self.cos_phi <= 1:
            raise ValueError("cos_phi must lie in (0, 1]")
        for name in ("sigma_load_rel", "sigma_pv_rel", "sigma_slack_v_rel", "sigma_min_kw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_floor_frac < 0:
            raise ValueError("sigma_floor_frac must be non-negative")
        if self.pv_reference != "max_installed":
            raise ValueError(f"unknown PV reference rule {self.pv_reference!r}")

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.cos_phi))


# noise ---------------------------------------------------------------------

def noise_sigma(relative_max_error, reference_magnitude):
    """Standard deviation whose 3-sigma band is the maximum tolerated error."""
    return np.asarray(relative_max_error) / 100.0 * np.asarray(reference_magnitude) / 3.0


def noise_draw(true_value: float, relative_max_error: float, reference_magnitude: float,
               rng: np.random.Generator, clamp: bool = True) -> float:
    if not relative_max_error > 0 or not reference_magnitude > 0:
        raise ValueError("relative_max_error and reference_magnitude must be positive")
    sigma = float(noise_sigma(relative_max_error, reference_magnitude))
    e = rng.standard_normal()
    if clamp:
        e = min(max(e, -3.0), 3.0)
    return true_value + sigma * e


def timestep_rng(seed: int, t: int) -> np.random.Generator:
    """Independent substream for one timestep; draw k belongs to spec k."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))


# truth lookup --------------------------------------------------------------

def truth_value(grid: GridTopology, spec, sol: PowerFlowSolution) -> float:
    """Power-flow value (pu) of the quantity a spec or measurement describes."""
    net = grid.network
    q = spec.quantity
    try:
        if q is Quantity.VM:
            return float(abs(sol.v[grid.bus_index[spec.element]]))
        if q.is_flow:
            k = grid.line_index[spec.element]
            ln = grid.lines[k]
            if spec.end == ln.from_bus:
                s, i = sol.s_from[k], sol.i_from[k]
            elif spec.end == ln.to_bus:
                s, i = sol.s_to[k], sol.i_to[k]
            else:
                raise KeyError(spec.end)
            return float(s.real if q is Quantity.P_FLOW else s.imag if q is Quantity.Q_FLOW else abs(i))
        k = grid.prosumer_index[spec.element]
        s = sol.prosumer_s[k]
        if q is Quantity.P_INJ:
            return float(s.real)
        if q is Quantity.Q_INJ:
            return float(s.imag)
        vb = abs(sol.v[net.prosumer_bus[k]])
        return float(abs(s) / vb)
    except (KeyError, IndexError, TypeError):
        raise RuntimeError(f"no power-flow truth for {q.value} at {spec.location}") from None


def reference_magnitude(spec: MeasurementSpec, truth: float) -> float:
    if spec.quantity is Quantity.VM:
        return 1.0  # nominal voltage in per unit
    return max(abs(truth), MIN_REFERENCE_PU)


def synthesize_real(grid: GridTopology, specs: Sequence[MeasurementSpec], sol: PowerFlowSolution,
                    rng: np.random.Generator, clamp: bool = True) -> list[Measurement]:
    if not specs:
        return []
    truth = np.array([truth_value(grid, s, sol) for s in specs])
    ref = np.array([reference_magnitude(s, v) for s, v in zip(specs, truth)])
    sigma = noise_sigma([s.relative_max_error for s in specs], ref)
    e = rng.standard_normal(len(specs))
    if clamp:
        e = np.clip(e, -3.0, 3.0)
    values = truth + sigma * e
    return [Measurement(s.quantity, s.element, float(v), float(sd), "real", s.end)
            for s, v, sd in zip(specs, values, sigma)]


# pseudo values -------------------------------------------------------------

def pseudo_load(prosumer: Prosumer, t: int, h0: H0Profile, cos_phi: float = 0.95,
                h0_offset: int = 0) -> tuple[float, float]:
    """Standard-profile consumption scaled by annual energy; (P kW, Q kvar), load convention."""
    p = h0(h0_offset + t) * prosumer.annual_energy / h0.annual_energy
    return p, p * math.tan(math.acos(cos_phi))


def reference_pv_plant(grid: GridTopology) -> Prosumer:
    plants = [p for p in grid.prosumers if p.category == "pv_plant"]
    if not plants:
        raise GridError("grid has no PV plant to serve as pseudo-measurement reference")
    return min(plants, key=lambda p: (-p.installed_power, p.id))


def pseudo_pv(plant: Prosumer, reference: Prosumer, reference_p_kw: float,
              cos_phi: float = 0.95) -> tuple[float, float]:
    """Reference plant's true output scaled by installed power; (P kW, Q kvar)."""
    p = reference_p_kw * (plant.installed_power / reference.installed_power)
    return p, p * math.tan(math.acos(cos_phi))


def pseudo_slack_voltage(grid: GridTopology, sol: PowerFlowSolution, cfg: PseudoConfig = PseudoConfig()) -> Measurement:
    vm = float(abs(sol.v[grid.bus_index[grid.slack_bus]]))
    return Measurement(Quantity.VM, grid.slack_bus, vm, cfg.sigma_slack_v_rel * 1.0, "pseudo")


@dataclass
class PseudoModel:
    """Per-grid data needed for pseudo values: H0 series, PV reference, sigma floors."""

    grid: GridTopology
    cfg: PseudoConfig = field(default_factory=PseudoConfig)

    def __post_init__(self):
        self.h0 = H0Profile.from_csv(self.cfg.h0_path) if self.cfg.h0_path else H0Profile.bundled()
        plants = [p for p in self.grid.prosumers if p.category == "pv_plant"]
        self.reference = reference_pv_plant(self.grid) if plants else None
        self.mean_kw = {}
        for p in self.grid.prosumers:
            if p.category == "pv_plant":
                ref = self.grid.profiles[self.reference.profile][:, 0]
                self.mean_kw[p.id] = float(np.mean(np.abs(ref))) * p.installed_power / self.reference.installed_power
            else:
                self.mean_kw[p.id] = p.annual_energy / HOURS_PER_YEAR

    def value(self, prosumer: Prosumer, t: int) -> tuple[float, float]:
        if prosumer.category == "pv_plant":
            ref_p = float(self.grid.profiles[self.reference.profile][t, 0])
            return pseudo_pv(prosumer, self.reference, ref_p, self.cfg.cos_phi)
        return pseudo_load(prosumer, t, self.h0, self.cfg.cos_phi, self.grid.h0_offset)

    def sigma(self, prosumer: Prosumer, p_kw: float, q_kw: float) -> tuple[float, float]:
        rel = self.cfg.sigma_pv_rel if prosumer.category == "pv_plant" else self.cfg.sigma_load_rel
        floor_p = max(self.cfg.sigma_floor_frac * self.mean_kw[prosumer.id], self.cfg.sigma_min_kw)
        floor_q = max(floor_p * self.cfg.tan_phi, self.cfg.sigma_min_kw)
        return max(rel * abs(p_kw), floor_p), max(rel * abs(q_kw), floor_q)

    def measurements(self, prosumer: Prosumer, t: int) -> list[Measurement]:
        p, q = self.value(prosumer, t)
        sp, sq = self.sigma(prosumer, p, q)
        net = self.grid.network
        # load convention (kW) -> generator convention (pu)
        return [
            Measurement(Quantity.P_INJ, prosumer.id, float(-net.kw_to_pu(p)), float(net.kw_to_pu(sp)), "pseudo"),
            Measurement(Quantity.Q_INJ, prosumer.id, float(-net.kw_to_pu(q)), float(net.kw_to_pu(sq)), "pseudo"),
        ]


def pseudo_errors(grid: GridTopology, pseudo: PseudoModel, steps: Sequence[int]) -> list[tuple[str, float, float]]:
    """Per prosumer: RMS and mean absolute pseudo-minus-true active power (kW) over ``steps``."""
    out = []
    for p in grid.prosumers:
        truth = grid.profiles[p.profile][list(steps), 0]
        est = np.array([pseudo.value(p, t)[0] for t in steps])
        err = est - truth
        out.append((p.id, float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))))
    return out


def assemble_measurement_vector(grid: GridTopology, specs: Sequence[MeasurementSpec], sol: PowerFlowSolution,
                                pseudo: PseudoConfig | PseudoModel, rng: np.random.Generator, t: int | None = None,
                                clamp: bool = True) -> list[Measurement]:
    """Real measurements, then pseudo pairs for unmetered prosumers, then the slack voltage."""
    if isinstance(pseudo, PseudoConfig):
        pseudo = PseudoModel(grid, pseudo)
    t = sol.t if t is None else t
    out = synthesize_real(grid, specs, sol, rng, clamp)
    metered = {s.element for s in specs if s.quantity is Quantity.P_INJ}
    for p in grid.prosumers:
        if p.id not in metered:
            out += pseudo.measurements(p, t)
    out.append(pseudo_slack_voltage(grid, sol, pseudo.cfg))
    return out


MEASUREMENT_COLUMNS = ("t", "quantity", "location", "value", "sigma", "origin")


def write_measurements(fh: TextIO, t: int, measurements: Iterable[Measurement], header: bool = False) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(MEASUREMENT_COLUMNS)
    for m in measurements:
        w.writerow((t, m.quantity.value, m.location, repr(m.value), repr(m.sigma), m.origin))
