"""Residential standard-load-profile approximation for load pseudo-measurements.

The bundled profile is a synthetic weekday/Saturday/Sunday day shape with a
seasonal scaling polynomial, normalised to 1000 kWh/year. It is *not* the
licensed BDEW H0 data; supply the real profile through ``H0Profile.from_csv``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .grid import STEP_HOURS, STEPS_PER_YEAR

STEPS_PER_DAY = 96
REFERENCE_ENERGY_KWH = 1000.0


def _bump(h, centre, width):
    return np.exp(-0.5 * ((h - centre) / width) ** 2)


def day_shape(day_type: str) -> np.ndarray:
    """Relative quarter-hour load shape for one day (unnormalised)."""
    h = (np.arange(STEPS_PER_DAY) + 0.5) * STEP_HOURS
    base = 0.38 + 0.10 * _bump(h, 0.0, 2.0) + 0.10 * _bump(h, 24.0, 2.0)
    if day_type == "weekday":
        return base + 0.45 * _bump(h, 7.25, 1.0) + 0.40 * _bump(h, 12.5, 1.6) + 0.85 * _bump(h, 19.0, 2.2)
    if day_type == "saturday":
        return base + 0.35 * _bump(h, 9.0, 1.5) + 0.60 * _bump(h, 12.5, 1.8) + 0.80 * _bump(h, 19.0, 2.3)
    if day_type == "sunday":
        return base + 0.30 * _bump(h, 9.5, 1.5) + 0.75 * _bump(h, 12.25, 1.6) + 0.75 * _bump(h, 18.5, 2.4)
    raise ValueError(f"unknown day type {day_type!r}")


def seasonal_factor(day_of_year: np.ndarray) -> np.ndarray:
    """Fourth-order seasonal polynomial used by German standard load profiles."""
    d = np.asarray(day_of_year, dtype=float) + 1.0
    return -3.92e-10 * d**4 + 3.2e-7 * d**3 - 7.02e-5 * d**2 + 2.1e-3 * d + 1.24


@lru_cache(maxsize=4)
def synthetic_h0(steps: int = STEPS_PER_YEAR, first_weekday: int = 0) -> np.ndarray:
    """Synthetic H0-like active power series in kW, normalised to 1000 kWh over a year.

    ``first_weekday`` is the weekday of step 0 (0 = Monday).
    """
    shapes = {k: day_shape(k) for k in ("weekday", "saturday", "sunday")}
    n_days = -(-steps // STEPS_PER_DAY)
    days = []
    for d in range(n_days):
        wd = (first_weekday + d) % 7
        key = "sunday" if wd == 6 else "saturday" if wd == 5 else "weekday"
        days.append(shapes[key] * seasonal_factor(d % 365))
    p = np.concatenate(days)[:steps]
    year = np.concatenate(days)[:STEPS_PER_YEAR] if steps >= STEPS_PER_YEAR else p
    scale = REFERENCE_ENERGY_KWH / (year.sum() * STEP_HOURS * STEPS_PER_YEAR / len(year))
    out = p * scale
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class H0Profile:
    """Active-power series in kW and the annual energy it represents."""

    p_kw: np.ndarray
    name: str = "synthetic-h0"

    @property
    def annual_energy(self) -> float:
        """Energy of one year of the series (scaled if the series is shorter or longer)."""
        return float(self.p_kw.sum() * STEP_HOURS * STEPS_PER_YEAR / len(self.p_kw))

    def __call__(self, t: int) -> float:
        return float(self.p_kw[t % len(self.p_kw)])

    @classmethod
    def bundled(cls) -> "H0Profile":
        return cls(synthetic_h0())

    @classmethod
    def from_csv(cls, path: str | Path) -> "H0Profile":
        """Read a ``t_index,p_kw`` file."""
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["t_index"]), float(row["p_kw"])))
        rows.sort()
        return cls(np.array([r[1] for r in rows]), name=Path(path).stem)
