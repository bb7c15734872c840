"""Measurement-device allocation for an equipment variant.

A variant names an optional substation device plus iKVS / iMSys penetration
percentages. Allocation turns it into concrete devices and then into
``MeasurementSpec`` records with their maximum tolerated errors.
"""

from __future__ import annotations

import configparser
import csv
import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid import GridTopology, electrical_distance

#: iMSys priority threshold on annual consumption, kWh.
OBLIGATION_KWH = 6000.0
_DIST_DIGITS = 9  # distances equal to 1 nΩ share a priority rank


class DeviceKind(str, enum.Enum):
    DIGIONS = "digiONS"
    IONS = "iONS"
    IKVS = "iKVS"
    IMSYS = "iMSys"


class Quantity(str, enum.Enum):
    VM = "V_mag"
    P_INJ = "P_inj"
    Q_INJ = "Q_inj"
    I_INJ = "I_inj"
    P_FLOW = "P_flow"
    Q_FLOW = "Q_flow"
    I_FLOW = "I_flow"

    @property
    def is_flow(self) -> bool:
        return self in (Quantity.P_FLOW, Quantity.Q_FLOW, Quantity.I_FLOW)

    @property
    def is_injection(self) -> bool:
        return self in (Quantity.P_INJ, Quantity.Q_INJ, Quantity.I_INJ)


# Maximum tolerated error in percent, per device family.
MAX_ERROR = {
    "substation": {"V": 0.5, "I": 1.0, "P": 0.5, "Q": 1.0},
    DeviceKind.IKVS: {"V": 0.5, "I": 1.0, "P": 0.5, "Q": 1.0},
    DeviceKind.IMSYS: {"V": 0.5, "I": 1.0, "P": 1.0, "Q": 2.0},
}


def _family(kind: DeviceKind):
    return "substation" if kind in (DeviceKind.DIGIONS, DeviceKind.IONS) else kind


@dataclass(frozen=True)
class MeasurementSpec:
    """What is measured and where.

    ``element`` is a bus id (V_mag), a prosumer id (injections) or a line id
    (flows); flows are taken at line end ``end``.
    """

    quantity: Quantity
    element: str
    relative_max_error: float  # percent
    source_device: DeviceKind
    end: str | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.quantity.value, self.element, self.end or "")

    @property
    def location(self) -> str:
        return f"{self.element}@{self.end}" if self.end else self.element


@dataclass(frozen=True)
class EquipmentVariant:
    name: str = "1"
    substation_device: DeviceKind | None = None
    ikvs_fraction: float = 0.0
    imsys_fraction: float = 0.0
    allocation_seed: int = 0

    def __post_init__(self):
        for label, v in (("ikvs", self.ikvs_fraction), ("imsys", self.imsys_fraction)):
            if not 0 <= v <= 100:
                raise ValueError(f"variant {self.name}: {label} percentage {v} outside [0, 100]")
        if self.substation_device not in (None, DeviceKind.DIGIONS, DeviceKind.IONS):
            raise ValueError(f"variant {self.name}: substation device must be digiONS, iONS or none")

    def describe(self) -> str:
        parts = [self.substation_device.value] if self.substation_device else []
        if self.ikvs_fraction:
            parts.append(f"{self.ikvs_fraction:g}% iKVS")
        if self.imsys_fraction:
            parts.append(f"{self.imsys_fraction:g}% iMSys")
        return " + ".join(parts) or "reference"

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "substation": self.substation_device.value if self.substation_device else "none",
            "ikvs_pct": self.ikvs_fraction,
            "imsys_pct": self.imsys_fraction,
            "seed": self.allocation_seed,
        }


def standard_variants(seed: int = 0) -> list[EquipmentVariant]:
    """The six rollout strategies compared in the study, in declared order."""
    return [
        EquipmentVariant("1", None, 0, 0, seed),
        EquipmentVariant("2", DeviceKind.DIGIONS, 0, 0, seed),
        EquipmentVariant("3", None, 100, 0, seed),
        EquipmentVariant("4", None, 25, 0, seed),
        EquipmentVariant("5", None, 0, 11, seed),
        EquipmentVariant("6", None, 0, 5, seed),
    ]


_SUBSTATION_NAMES = {"none": None, "": None, "-": None,
                     "digions": DeviceKind.DIGIONS, "ions": DeviceKind.IONS}


def variant_from_mapping(name: str, values) -> EquipmentVariant:
    sub = str(values.get("substation", "none")).strip().lower()
    if sub not in _SUBSTATION_NAMES:
        raise ValueError(f"variant {name}: unknown substation device {sub!r}")
    return EquipmentVariant(
        name=name,
        substation_device=_SUBSTATION_NAMES[sub],
        ikvs_fraction=float(values.get("ikvs_pct", 0) or 0),
        imsys_fraction=float(values.get("imsys_pct", 0) or 0),
        allocation_seed=int(values.get("seed", 0) or 0),
    )


def load_variant(path: str | Path, name: str | None = None) -> EquipmentVariant:
    """Read a section-less ``key = value`` variant file."""
    path = Path(path)
    cp = configparser.ConfigParser()
    cp.read_string("[variant]\n" + path.read_text(encoding="utf-8"))
    return variant_from_mapping(name or path.stem, cp["variant"])


# allocation ----------------------------------------------------------------

def target_count(fraction: float, available: int) -> int:
    """Round-half-up of ``fraction`` percent of ``available``."""
    exact = Fraction(str(fraction)) * available / 100
    return min(available, math.floor(exact + Fraction(1, 2)))


def _random_order(ids: list[str], seed: int, stream: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))
    return [ids[i] for i in rng.permutation(len(ids))]


def _leaders(candidates: list[str], score: dict[str, float]) -> list[str]:
    if not candidates:
        return []
    best = max(score[c] for c in candidates)
    return sorted(c for c in candidates if score[c] == best)


def ikvs_priority(grid: GridTopology, seed: int) -> list[str]:
    """Full cabinet priority sequence; any allocation is a prefix of it.

    The cabinet(s) farthest from the substation come first, then the one(s)
    with most feeders among the rest, then the remainder in seeded random order.
    """
    ids = sorted(c.id for c in grid.cabinets)
    cab = {c.id: c for c in grid.cabinets}
    dist = {i: round(electrical_distance(grid, cab[i].busbar, grid.substation_busbar), _DIST_DIGITS) for i in ids}
    feeders = {i: cab[i].feeder_count for i in ids}

    order = _leaders(ids, dist)
    rest = [i for i in ids if i not in order]
    tier2 = _leaders(rest, feeders)
    order += tier2
    rest = [i for i in rest if i not in tier2]
    return order + _random_order(rest, seed, 1)


def imsys_priority(grid: GridTopology, seed: int) -> list[str]:
    """Full smart-meter priority sequence over all prosumers."""
    pros = sorted(grid.prosumers, key=lambda p: p.id)
    big = sorted((p for p in pros if p.annual_energy > OBLIGATION_KWH), key=lambda p: (-p.annual_energy, p.id))
    order = [p.id for p in big]
    order += [p.id for p in pros if p.category == "electric_vehicle" and p.id not in order]
    rest = [p.id for p in pros if p.id not in order]
    return order + _random_order(rest, seed, 2)


def allocate_ikvs(grid: GridTopology, fraction: float, seed: int = 0) -> list[str]:
    if not 0 <= fraction <= 100:
        raise ValueError(f"iKVS percentage {fraction} outside [0, 100]")
    n = target_count(fraction, len(grid.cabinets))
    return ikvs_priority(grid, seed)[:n] if n else []


def allocate_imsys(grid: GridTopology, fraction: float, seed: int = 0) -> list[str]:
    if not 0 <= fraction <= 100:
        raise ValueError(f"iMSys percentage {fraction} outside [0, 100]")
    n = target_count(fraction, len(grid.prosumers))
    return imsys_priority(grid, seed)[:n] if n else []


@dataclass(frozen=True)
class Allocation:
    variant: EquipmentVariant
    ikvs: tuple[str, ...]
    imsys: tuple[str, ...]

    def rows(self) -> list[tuple[str, str]]:
        out = []
        if self.variant.substation_device:
            out.append((self.variant.substation_device.value, "substation"))
        out += [(DeviceKind.IKVS.value, c) for c in self.ikvs]
        out += [(DeviceKind.IMSYS.value, p) for p in self.imsys]
        return out


def allocate(grid: GridTopology, variant: EquipmentVariant) -> Allocation:
    return Allocation(
        variant,
        tuple(allocate_ikvs(grid, variant.ikvs_fraction, variant.allocation_seed)),
        tuple(allocate_imsys(grid, variant.imsys_fraction, variant.allocation_seed)),
    )


def write_allocation(allocation: Allocation, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("device_kind", "location_id"))
        w.writerows(allocation.rows())


# device -> specs -------------------------------------------------------------

def _flow_specs(line: str, end: str, kind: DeviceKind) -> list[MeasurementSpec]:
    err = MAX_ERROR[_family(kind)]
    return [
        MeasurementSpec(Quantity.P_FLOW, line, err["P"], kind, end),
        MeasurementSpec(Quantity.Q_FLOW, line, err["Q"], kind, end),
        MeasurementSpec(Quantity.I_FLOW, line, err["I"], kind, end),
    ]


def device_specs(grid: GridTopology, kind: DeviceKind, location: str | None = None) -> list[MeasurementSpec]:
    """Specs produced by one device.

    ``location`` is ignored for substation devices, a cabinet id for iKVS and a
    prosumer id for iMSys.
    """
    if kind in (DeviceKind.DIGIONS, DeviceKind.IONS):
        bb = grid.substation_busbar
        err = MAX_ERROR["substation"]
        specs = _flow_specs(grid.transformer.line, bb, kind)
        specs.append(MeasurementSpec(Quantity.VM, bb, err["V"], kind))
        if kind is DeviceKind.DIGIONS:
            for lid in grid.feeder_lines:
                specs += _flow_specs(lid, bb, kind)
        return specs
    if kind is DeviceKind.IKVS:
        cab = next(c for c in grid.cabinets if c.id == location)
        specs = [MeasurementSpec(Quantity.VM, cab.busbar, MAX_ERROR[kind]["V"], kind)]
        for lid in cab.feeder_lines:
            specs += _flow_specs(lid, cab.busbar, kind)
        return specs
    if kind is DeviceKind.IMSYS:
        p = grid.prosumer(location)
        err = MAX_ERROR[kind]
        return [
            MeasurementSpec(Quantity.P_INJ, p.id, err["P"], kind),
            MeasurementSpec(Quantity.Q_INJ, p.id, err["Q"], kind),
            MeasurementSpec(Quantity.VM, p.bus, err["V"], kind),
            MeasurementSpec(Quantity.I_INJ, p.id, err["I"], kind),
        ]
    raise ValueError(f"unknown device kind {kind}")


def merge_specs(specs: Iterable[MeasurementSpec]) -> list[MeasurementSpec]:
    """De-duplicate by (quantity, location), keeping the smaller max error at the first position."""
    out: dict[tuple, MeasurementSpec] = {}
    for s in specs:
        cur = out.get(s.key)
        if cur is None or s.relative_max_error < cur.relative_max_error:
            out[s.key] = s
    return list(out.values())


def expand_to_specs(grid: GridTopology, variant: EquipmentVariant,
                    allocation: Allocation | None = None) -> list[MeasurementSpec]:
    if allocation is None:
        allocation = allocate(grid, variant)
    specs: list[MeasurementSpec] = []
    if variant.substation_device:
        specs += device_specs(grid, variant.substation_device)
    for cab in allocation.ikvs:
        specs += device_specs(grid, DeviceKind.IKVS, cab)
    for pid in allocation.imsys:
        specs += device_specs(grid, DeviceKind.IMSYS, pid)
    return merge_specs(specs)
