"""Low-voltage grid model: buses, lines, cabinets, prosumers and their profiles.

Grids are read from a directory of CSV files (see ``load_grid``) and are
immutable once loaded. Ids are compared as plain strings, so zero-padded ids
sort naturally.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

BUS_KINDS = ("slack_coupling", "substation_busbar", "cabinet_busbar", "junction", "connection_point")
PROSUMER_CATEGORIES = ("household", "pv_plant", "electric_vehicle", "heat_pump", "other")

#: Number of quarter-hour steps in a (non-leap) year.
STEPS_PER_YEAR = 35040
STEP_HOURS = 0.25


class GridError(ValueError):
    """Invalid or inconsistent grid description."""


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str
    nominal_voltage: float

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.nominal_voltage > 0:
            raise GridError(f"bus {self.id}: nominal voltage must be positive")


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    resistance: float
    reactance: float
    thermal_current_limit: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"line {self.id}: from and to bus are both {self.from_bus}")
        if self.resistance < 0:
            raise GridError(f"line {self.id}: negative resistance")
        if self.resistance == 0 and self.reactance == 0:
            raise GridError(f"line {self.id}: zero impedance")
        if not self.thermal_current_limit > 0:
            raise GridError(f"line {self.id}: thermal current limit must be positive")

    @property
    def impedance(self) -> complex:
        return complex(self.resistance, self.reactance)

    def other_end(self, bus: str) -> str:
        return self.to_bus if bus == self.from_bus else self.from_bus


@dataclass(frozen=True)
class CableCabinet:
    id: str
    busbar: str
    feeder_lines: tuple[str, ...]

    @property
    def feeder_count(self) -> int:
        return len(self.feeder_lines)


@dataclass(frozen=True)
class Prosumer:
    id: str
    bus: str
    category: str
    annual_energy: float  # kWh/year
    installed_power: float  # kW
    profile: str

    def __post_init__(self):
        if self.category not in PROSUMER_CATEGORIES:
            raise GridError(f"prosumer {self.id}: unknown category {self.category!r}")
        if self.annual_energy < 0 or self.installed_power < 0:
            raise GridError(f"prosumer {self.id}: negative energy or installed power")
        if self.category == "pv_plant" and not self.installed_power > 0:
            raise GridError(f"prosumer {self.id}: PV plant needs installed power > 0")
        if self.category == "household" and not self.annual_energy > 0:
            raise GridError(f"prosumer {self.id}: household needs annual energy > 0")

    @property
    def is_consumer(self) -> bool:
        return self.category != "pv_plant"


class ProfileLibrary(Mapping):
    """Profile id -> array of shape (T, 2) holding (P kW, Q kvar) per quarter hour.

    Values use the load convention: consumption positive, generation negative.
    """

    def __init__(self, series: Mapping[str, np.ndarray]):
        self._series: dict[str, np.ndarray] = {}
        for key in sorted(series):
            arr = np.array(series[key], dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
                raise GridError(f"profile {key}: expected a non-empty (T, 2) series")
            arr.setflags(write=False)
            self._series[key] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        return self._series[key]

    def __iter__(self):
        return iter(self._series)

    def __len__(self) -> int:
        return len(self._series)

    def __eq__(self, other):
        if not isinstance(other, ProfileLibrary):
            return NotImplemented
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None

    @property
    def length(self) -> int:
        """Common series length T (the shortest one if lengths differ)."""
        return min((len(v) for v in self._series.values()), default=0)


@dataclass(frozen=True)
class Transformer:
    """MV/LV coupling: the slack bus, the LV busbar and the branch joining them."""

    slack_bus: str
    busbar: str
    line: str
    rating_va: float


@dataclass(frozen=True)
class GridTopology:
    name: str
    base_va: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    cabinets: tuple[CableCabinet, ...]
    prosumers: tuple[Prosumer, ...]
    transformer: Transformer
    profiles: ProfileLibrary = field(compare=True)
    h0_offset: int = 0

    def __post_init__(self):
        _validate(self)

    # lookups ---------------------------------------------------------------
    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def line_index(self) -> dict[str, int]:
        return {ln.id: i for i, ln in enumerate(self.lines)}

    @cached_property
    def prosumer_index(self) -> dict[str, int]:
        return {p.id: i for i, p in enumerate(self.prosumers)}

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def line(self, line_id: str) -> Line:
        return self.lines[self.line_index[line_id]]

    def prosumer(self, prosumer_id: str) -> Prosumer:
        return self.prosumers[self.prosumer_index[prosumer_id]]

    @property
    def slack_bus(self) -> str:
        return self.transformer.slack_bus

    @property
    def substation_busbar(self) -> str:
        return self.transformer.busbar

    @cached_property
    def prosumers_at(self) -> dict[str, tuple[Prosumer, ...]]:
        out: dict[str, list[Prosumer]] = {}
        for p in self.prosumers:
            out.setdefault(p.bus, []).append(p)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(b.id for b in self.buses)
        for ln in self.lines:
            g.add_edge(ln.from_bus, ln.to_bus, key=ln.id, weight=abs(ln.impedance))
        return g

    @cached_property
    def feeders(self) -> tuple[tuple[str, ...], ...]:
        """Bus sets hanging off the substation busbar, ordered by smallest bus id."""
        g = nx.Graph(self.graph)
        g.remove_node(self.substation_busbar)
        comps = [sorted(c) for c in nx.connected_components(g) if self.slack_bus not in c]
        comps.sort(key=lambda c: c[0])
        return tuple(tuple(c) for c in comps)

    @cached_property
    def feeder_lines(self) -> tuple[str, ...]:
        """Lines leaving the substation busbar towards the feeders (transformer excluded)."""
        bb = self.substation_busbar
        return tuple(sorted(ln.id for ln in self.lines
                            if bb in (ln.from_bus, ln.to_bus) and ln.id != self.transformer.line))

    @cached_property
    def network(self):
        """Per-unit electrical model (see ``lvse.powerflow.NetworkModel``)."""
        from .powerflow import NetworkModel
        return NetworkModel(self)

    def profile_array(self) -> np.ndarray:
        """Stacked prosumer profiles, shape (n_prosumers, T, 2), truncated to the common length."""
        if not self.prosumers:
            return np.zeros((0, self.profiles.length or 0, 2))
        lengths = [len(self.profiles[p.profile]) for p in self.prosumers]
        T = min(lengths)
        return np.stack([self.profiles[p.profile][:T] for p in self.prosumers])


def _validate(grid: GridTopology) -> None:
    ids = [b.id for b in grid.buses]
    _check_unique(ids, "bus")
    _check_unique([ln.id for ln in grid.lines], "line")
    _check_unique([c.id for c in grid.cabinets], "cabinet")
    _check_unique([p.id for p in grid.prosumers], "prosumer")
    known = set(ids)

    slacks = [b.id for b in grid.buses if b.kind == "slack_coupling"]
    if len(slacks) != 1:
        raise GridError(f"expected exactly one slack_coupling bus, found {len(slacks)}")
    if not grid.base_va > 0:
        raise GridError("base power must be positive")

    for ln in grid.lines:
        for b in (ln.from_bus, ln.to_bus):
            if b not in known:
                raise GridError(f"line {ln.id}: unknown bus {b}")
        vf = grid.bus(ln.from_bus).nominal_voltage
        vt = grid.bus(ln.to_bus).nominal_voltage
        if not math.isclose(vf, vt):
            raise GridError(f"line {ln.id}: connects buses of different nominal voltage")

    tr = grid.transformer
    if tr.slack_bus != slacks[0]:
        raise GridError(f"grid: slack bus {tr.slack_bus} is not the slack_coupling bus {slacks[0]}")
    if tr.busbar not in known:
        raise GridError(f"grid: unknown bus {tr.busbar}")
    if grid.bus(tr.busbar).kind != "substation_busbar":
        raise GridError(f"grid: bus {tr.busbar} is not a substation_busbar")
    if tr.line not in grid.line_index:
        raise GridError(f"grid: unknown transformer line {tr.line}")
    tl = grid.line(tr.line)
    if {tl.from_bus, tl.to_bus} != {tr.slack_bus, tr.busbar}:
        raise GridError(f"grid: transformer line {tr.line} does not join {tr.slack_bus} and {tr.busbar}")

    line_ids = set(grid.line_index)
    for cab in grid.cabinets:
        if cab.busbar not in known:
            raise GridError(f"cabinet {cab.id}: unknown bus {cab.busbar}")
        if not cab.feeder_lines:
            raise GridError(f"cabinet {cab.id}: no feeder lines")
        for lid in cab.feeder_lines:
            if lid not in line_ids:
                raise GridError(f"cabinet {cab.id}: unknown line {lid}")
            ln = grid.line(lid)
            if cab.busbar not in (ln.from_bus, ln.to_bus):
                raise GridError(f"cabinet {cab.id}: line {lid} is not incident to busbar {cab.busbar}")

    for p in grid.prosumers:
        if p.bus not in known:
            raise GridError(f"prosumer {p.id}: unknown bus {p.bus}")
        if p.profile not in grid.profiles:
            raise GridError(f"prosumer {p.id}: missing profile {p.profile}")

    if not nx.is_connected(grid.graph):
        parts = sorted(sorted(c)[0] for c in nx.connected_components(grid.graph))
        raise GridError(f"grid is disconnected; components start at buses {parts}")


def _check_unique(ids: Iterable[str], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise GridError(f"duplicate {what} id {i}")
        seen.add(i)


# topology queries ----------------------------------------------------------

def electrical_distance(grid: GridTopology, source: str, target: str) -> float:
    """Shortest-path length in ohms, each line weighted by |R + jX|."""
    for b in (source, target):
        if b not in grid.bus_index:
            raise GridError(f"unknown bus {b}")
    if source == target:
        return 0.0
    return float(nx.dijkstra_path_length(grid.graph, source, target, weight="weight"))


def feeder_of(grid: GridTopology, bus: str) -> int:
    if bus not in grid.bus_index:
        raise GridError(f"unknown bus {bus}")
    if bus in (grid.substation_busbar, grid.slack_bus):
        raise GridError(f"bus {bus} belongs to the substation, not to a feeder")
    for k, members in enumerate(grid.feeders):
        if bus in members:
            return k
    raise GridError(f"bus {bus} is not on any feeder")


# CSV ingestion -------------------------------------------------------------

GRID_FILES = ("buses.csv", "lines.csv", "cabinets.csv", "prosumers.csv", "profiles.csv", "grid.csv")

_COLUMNS = {
    "buses.csv": ("id", "kind", "vn_volts"),
    "lines.csv": ("id", "from", "to", "r_ohm", "x_ohm", "i_max_a"),
    "cabinets.csv": ("id", "busbar", "feeder_lines"),
    "prosumers.csv": ("id", "bus", "category", "annual_kwh", "installed_kw", "profile_id"),
    "profiles.csv": ("profile_id", "t_index", "p_kw", "q_kvar"),
    "grid.csv": ("base_va", "slack_bus", "substation_busbar"),
}


def bundled_grids() -> list[str]:
    root = resources.files("lvse") / "data" / "grids"
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def resolve_grid_path(path_or_name: str | Path) -> Path:
    """Return a directory for either a filesystem path or a bundled grid name."""
    p = Path(path_or_name)
    if p.is_dir():
        return p
    bundled = resources.files("lvse") / "data" / "grids" / str(path_or_name)
    if bundled.is_dir():
        return Path(str(bundled))
    raise GridError(f"grid directory not found: {path_or_name}")


def _read(path: Path, name: str) -> list[dict[str, str]]:
    fpath = path / name
    if not fpath.exists():
        if name == "cabinets.csv":
            return []
        raise GridError(f"missing file {fpath}")
    with open(fpath, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in _COLUMNS[name] if c not in header]
        if missing:
            raise GridError(f"{name}: missing columns {missing}")
        return list(reader)


def _num(row: dict, col: str, rid: str, fname: str) -> float:
    try:
        return float(row[col])
    except (TypeError, ValueError):
        raise GridError(f"{fname}: record {rid}: bad number in column {col}: {row.get(col)!r}") from None


def load_grid(path: str | Path) -> GridTopology:
    """Load and validate a grid from a directory of CSV files.

    ``path`` may also be the name of a bundled grid (see ``bundled_grids``).
    """
    path = resolve_grid_path(path)

    buses = []
    for row in _read(path, "buses.csv"):
        buses.append(Bus(row["id"], row["kind"], _num(row, "vn_volts", row["id"], "buses.csv")))
    known = {b.id for b in buses}

    lines = []
    for row in _read(path, "lines.csv"):
        rid = row["id"]
        for end in ("from", "to"):
            if row[end] not in known:
                raise GridError(f"line {rid}: unknown bus {row[end]}")
        lines.append(Line(rid, row["from"], row["to"],
                          _num(row, "r_ohm", rid, "lines.csv"), _num(row, "x_ohm", rid, "lines.csv"),
                          _num(row, "i_max_a", rid, "lines.csv")))

    cabinets = []
    for row in _read(path, "cabinets.csv"):
        feeders = tuple(s.strip() for s in row["feeder_lines"].split(";") if s.strip())
        cabinets.append(CableCabinet(row["id"], row["busbar"], feeders))

    prosumers = []
    for row in _read(path, "prosumers.csv"):
        rid = row["id"]
        prosumers.append(Prosumer(rid, row["bus"], row["category"],
                                  _num(row, "annual_kwh", rid, "prosumers.csv"),
                                  _num(row, "installed_kw", rid, "prosumers.csv"), row["profile_id"]))

    profiles = _read_profiles(path / "profiles.csv")

    rows = _read(path, "grid.csv")
    if len(rows) != 1:
        raise GridError("grid.csv: expected exactly one record")
    g = rows[0]
    slack, busbar = g["slack_bus"], g["substation_busbar"]
    for b in (slack, busbar):
        if b not in known:
            raise GridError(f"grid.csv: unknown bus {b}")
    tline = (g.get("transformer_line") or "").strip()
    if not tline:
        cands = sorted(ln.id for ln in lines if {ln.from_bus, ln.to_bus} == {slack, busbar})
        if len(cands) != 1:
            raise GridError(f"grid.csv: need exactly one line between {slack} and {busbar}, found {len(cands)}")
        tline = cands[0]
    rating = float(g.get("rating_va") or 0.0)
    return GridTopology(
        name=(g.get("name") or path.name).strip(),
        base_va=_num(g, "base_va", "grid", "grid.csv"),
        buses=tuple(buses),
        lines=tuple(lines),
        cabinets=tuple(cabinets),
        prosumers=tuple(prosumers),
        transformer=Transformer(slack, busbar, tline, rating),
        profiles=profiles,
        h0_offset=int(g.get("h0_offset") or 0),
    )


def _read_profiles(fpath: Path) -> ProfileLibrary:
    if not fpath.exists():
        raise GridError(f"missing file {fpath}")
    raw: dict[str, list[tuple[int, float, float]]] = {}
    with open(fpath, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _COLUMNS["profiles.csv"] if c not in (reader.fieldnames or [])]
        if missing:
            raise GridError(f"profiles.csv: missing columns {missing}")
        for row in reader:
            pid = row["profile_id"]
            try:
                raw.setdefault(pid, []).append((int(row["t_index"]), float(row["p_kw"]), float(row["q_kvar"])))
            except ValueError:
                raise GridError(f"profiles.csv: record {pid}: bad value in row {row}") from None
    series = {}
    for pid, rows in raw.items():
        rows.sort()
        idx = [r[0] for r in rows]
        if idx != list(range(len(idx))):
            raise GridError(f"profiles.csv: profile {pid} has gaps or duplicate t_index values")
        series[pid] = np.array([[r[1], r[2]] for r in rows])
    return ProfileLibrary(series)


def save_grid(grid: GridTopology, path: str | Path) -> Path:
    """Write ``grid`` in the CSV layout read by ``load_grid``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    def write(name, header, rows):
        with open(path / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write("buses.csv", _COLUMNS["buses.csv"], [(b.id, b.kind, repr(b.nominal_voltage)) for b in grid.buses])
    write("lines.csv", _COLUMNS["lines.csv"],
          [(ln.id, ln.from_bus, ln.to_bus, repr(ln.resistance), repr(ln.reactance), repr(ln.thermal_current_limit))
           for ln in grid.lines])
    write("cabinets.csv", _COLUMNS["cabinets.csv"], [(c.id, c.busbar, ";".join(c.feeder_lines)) for c in grid.cabinets])
    write("prosumers.csv", _COLUMNS["prosumers.csv"],
          [(p.id, p.bus, p.category, repr(p.annual_energy), repr(p.installed_power), p.profile) for p in grid.prosumers])
    write("profiles.csv", _COLUMNS["profiles.csv"],
          [(pid, t, repr(float(pq[0])), repr(float(pq[1])))
           for pid, arr in grid.profiles.items() for t, pq in enumerate(arr)])
    tr = grid.transformer
    write("grid.csv", _COLUMNS["grid.csv"] + ("transformer_line", "rating_va", "name", "h0_offset"),
          [(repr(grid.base_va), tr.slack_bus, tr.busbar, tr.line, repr(tr.rating_va), grid.name, grid.h0_offset)])
    return path
