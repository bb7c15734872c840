"""Generators for the bundled synthetic fixture grids.

The bundled CSV files under ``lvse/data/grids`` were written by
``write_bundled_grids``; rerun it to recreate them. Cables are NAYY 4x150-like
(0.206 + j0.080 ohm/km, 275 A); the transformer is a 400 kVA unit referred to
the 400 V side.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .grid import (Bus, CableCabinet, GridTopology, Line, ProfileLibrary, Prosumer,
                   Transformer, save_grid)
from .h0 import STEPS_PER_DAY, synthetic_h0

R_KM, X_KM, I_CABLE = 0.206, 0.080, 275.0
TRAFO_R, TRAFO_X, TRAFO_I = 0.0040, 0.0155, 577.0
VN = 400.0
BASE_VA = 400e3


def _cable(lid, a, b, km):
    return Line(lid, a, b, round(R_KM * km, 6), round(X_KM * km, 6), I_CABLE)


def _household(rng, annual_kwh, steps, h0, offset, first_weekday):
    """Noisy, spiky household series around the scaled standard shape (kW)."""
    base = np.asarray(h0[offset:offset + steps]) * annual_kwh / 1000.0
    # log-AR(1) multiplicative deviation plus appliance bursts
    eps = rng.standard_normal(steps)
    z = np.empty(steps)
    acc = 0.0
    for k in range(steps):
        acc = 0.92 * acc + 0.22 * eps[k]
        z[k] = acc
    p = base * np.exp(z - 0.5 * 0.22**2 / (1 - 0.92**2))
    bursts = rng.random(steps) < 0.04
    p = p + bursts * rng.uniform(1.0, 3.5, steps) * (annual_kwh / 4000.0)
    pf = rng.uniform(0.93, 0.99)
    return np.column_stack([p, p * math.tan(math.acos(pf))])


def _pv(rng, kwp, steps, offset, cloud):
    step = np.arange(offset, offset + steps)
    hour = (step % STEPS_PER_DAY + 0.5) / 4.0
    doy = step // STEPS_PER_DAY
    half = 7.5 + 1.5 * math.sin(2 * math.pi * (doy.mean() - 80) / 365)
    shape = np.clip(np.cos(np.pi * (hour - 13.0) / (2 * half)), 0.0, None) ** 1.3
    own = np.clip(cloud + 0.05 * rng.standard_normal(steps), 0.05, 1.0)
    p = -0.78 * kwp * shape * own
    return np.column_stack([p, np.zeros(steps)])


def _ev(rng, annual_kwh, steps):
    p = np.zeros(steps)
    per_session = 11.0 * 0.25 * 10  # ~27.5 kWh sessions of 2.5 h at 11 kW
    days = steps // STEPS_PER_DAY
    sessions_per_day = annual_kwh / per_session / 365.0
    for d in range(days):
        if rng.random() < sessions_per_day:
            start = d * STEPS_PER_DAY + int(rng.integers(68, 80))
            p[start:start + 10] = 11.0
    return np.column_stack([p, np.zeros(steps)])


def _heat_pump(rng, annual_kwh, steps):
    mean = annual_kwh / 8760.0 * 1.3  # spring weeks: near-average demand
    on = np.zeros(steps)
    state = False
    for k in range(steps):
        if rng.random() < (0.12 if state else 0.10):
            state = not state
        on[k] = state
    p = on * 2.0 * mean + 0.15
    return np.column_stack([p, p * 0.25])


def _cloud(rng, steps):
    c = np.empty(steps)
    acc = 0.0
    for k in range(steps):
        acc = 0.97 * acc + 0.12 * rng.standard_normal()
        c[k] = acc
    return np.clip(0.7 + c, 0.1, 1.0)


def _profiles(prosumers, steps, offset, seed):
    rng = np.random.default_rng(seed)
    h0 = synthetic_h0()
    cloud = _cloud(rng, steps)
    series = {}
    for p in prosumers:
        if p.category == "household":
            series[p.profile] = _household(rng, p.annual_energy, steps, h0, offset, 0)
        elif p.category == "pv_plant":
            series[p.profile] = _pv(rng, p.installed_power, steps, offset, cloud)
        elif p.category == "electric_vehicle":
            series[p.profile] = _ev(rng, p.annual_energy, steps)
        elif p.category == "heat_pump":
            series[p.profile] = _heat_pump(rng, p.annual_energy, steps)
        else:
            series[p.profile] = _household(rng, p.annual_energy, steps, h0, offset, 0)
    return {k: np.round(v, 4) for k, v in series.items()}


def chain3(steps: int = 672, seed: int = 3) -> GridTopology:
    buses = (Bus("B1", "slack_coupling", VN), Bus("B2", "substation_busbar", VN), Bus("B3", "connection_point", VN))
    lines = (Line("L1", "B1", "B2", TRAFO_R, TRAFO_X, TRAFO_I), _cable("L2", "B2", "B3", 0.2))
    pros = (Prosumer("P1", "B3", "household", 4000.0, 0.0, "P1"),)
    offset = 120 * STEPS_PER_DAY
    return GridTopology("chain3", BASE_VA, buses, lines, (), pros, Transformer("B1", "B2", "L1", BASE_VA),
                        ProfileLibrary(_profiles(pros, steps, offset, seed)), offset)


def synth_rural(steps: int = 1344, seed: int = 11) -> GridTopology:
    """20 buses, two feeders, two cabinets (C1 far with 3 lines, C2 near with 2 lines), 18 prosumers."""
    kinds = {"B01": "slack_coupling", "B02": "substation_busbar", "B05": "cabinet_busbar",
             "B12": "cabinet_busbar", "B19": "junction"}
    buses = tuple(Bus(f"B{i:02d}", kinds.get(f"B{i:02d}", "connection_point"), VN) for i in range(1, 21))
    spans = [  # feeder 0
        ("L02", "B02", "B03", 0.20), ("L03", "B03", "B04", 0.15), ("L04", "B04", "B05", 0.20),
        ("L05", "B05", "B06", 0.10), ("L06", "B06", "B07", 0.12), ("L07", "B07", "B08", 0.10),
        ("L08", "B05", "B09", 0.15), ("L09", "B09", "B10", 0.10), ("L10", "B10", "B11", 0.10),
        # feeder 1
        ("L11", "B02", "B12", 0.10), ("L12", "B12", "B13", 0.10), ("L13", "B13", "B14", 0.10),
        ("L14", "B14", "B15", 0.10), ("L15", "B15", "B16", 0.08), ("L16", "B16", "B17", 0.08),
        ("L17", "B17", "B18", 0.08), ("L18", "B14", "B19", 0.06), ("L19", "B19", "B20", 0.05),
    ]
    lines = (Line("L01", "B01", "B02", TRAFO_R, TRAFO_X, TRAFO_I),) + tuple(_cable(*s) for s in spans)
    cabinets = (CableCabinet("C1", "B05", ("L04", "L05", "L08")), CableCabinet("C2", "B12", ("L11", "L12")))
    spec = [
        ("P01", "B03", "household", 4500, 0), ("P02", "B03", "pv_plant", 0, 10.0),
        ("P03", "B04", "household", 7500, 0), ("P04", "B06", "household", 3000, 0),
        ("P05", "B07", "electric_vehicle", 2500, 0), ("P06", "B07", "household", 6500, 0),
        ("P07", "B08", "household", 2800, 0), ("P08", "B08", "pv_plant", 0, 8.0),
        ("P09", "B09", "household", 3500, 0), ("P10", "B10", "heat_pump", 5000, 0),
        ("P11", "B11", "household", 4000, 0), ("P12", "B13", "household", 3200, 0),
        ("P13", "B14", "household", 2500, 0), ("P14", "B14", "pv_plant", 0, 6.0),
        ("P15", "B15", "household", 8200, 0), ("P16", "B16", "household", 1800, 0),
        ("P17", "B17", "household", 3900, 0), ("P18", "B20", "electric_vehicle", 3000, 0),
    ]
    pros = tuple(Prosumer(i, b, c, float(e), float(kw), i) for i, b, c, e, kw in spec)
    offset = 120 * STEPS_PER_DAY  # profiles start on 1 May
    return GridTopology("synth-rural", BASE_VA, buses, lines, cabinets, pros,
                        Transformer("B01", "B02", "L01", BASE_VA),
                        ProfileLibrary(_profiles(pros, steps, offset, seed)), offset)


def write_bundled_grids(root: str | Path | None = None) -> list[Path]:
    if root is None:
        root = Path(__file__).parent / "data" / "grids"
    root = Path(root)
    return [save_grid(g, root / g.name) for g in (chain3(), synth_rural())]
