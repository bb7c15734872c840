"""Estimation-quality metrics, pooled quantiles and use-case verdicts."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import GridTopology
from .powerflow import BranchFlows

VOLTAGE_QUANTILE = 0.99
LOADING_QUANTILE = 0.95


@dataclass(frozen=True)
class UseCaseThresholds:
    """Allowed |deviation| per use case as fractions: (voltage, line loading)."""

    limits: dict = field(default_factory=lambda: {
        "grid_planning": (0.02, 0.10),
        "connection_request": (0.015, 0.05),
        "monitoring_active_mgmt": (0.01, 0.05),
    })

    def __iter__(self):
        return iter(self.limits.items())


def voltage_quality(v_est, v_pf):
    """Signed relative voltage-magnitude deviation (|V_est| - |V_pf|) / |V_pf|."""
    v_est, v_pf = np.abs(v_est), np.abs(v_pf)
    if np.any(v_pf <= 0):
        raise ValueError("true voltage magnitude must be positive")
    return (v_est - v_pf) / v_pf


def loading_quality(i_est, i_pf, i_th_max):
    """Current-magnitude deviation as a fraction of the thermal limit."""
    i_th_max = np.asarray(i_th_max, dtype=float)
    if np.any(i_th_max <= 0):
        raise ValueError("thermal current limit must be positive")
    return (np.abs(i_est) - np.abs(i_pf)) / i_th_max


def pooled_quantile(samples, q: float) -> float:
    """Nearest-rank quantile of absolute sample values (1-based rank ceil(q n))."""
    a = np.abs(np.asarray(samples, dtype=float)).ravel()
    if a.size == 0:
        raise ValueError("no samples")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    rank = _nearest_rank(q, a.size)
    return float(np.partition(a, rank - 1)[rank - 1])


def _nearest_rank(q: float, n: int) -> int:
    # exact decimal product so the rank never hinges on binary rounding of q (0.07 * 100 -> rank 7, not 8)
    return max(1, math.ceil(Fraction(str(q)) * n))


def timestep_samples(grid: GridTopology, truth: BranchFlows, estimate: BranchFlows) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus voltage and per-line loading quality values for one timestep."""
    net = grid.network
    vq = voltage_quality(estimate.v, truth.v)
    i_est = net.current_to_amps(estimate.i_line)
    i_pf = net.current_to_amps(truth.i_line)
    return vq, loading_quality(i_est, i_pf, net.i_max_a)


@dataclass
class QualityReport:
    grid: str
    variant: dict
    t0: int
    t1: int
    seed: int
    voltage_samples: np.ndarray  # (T, n_bus)
    loading_samples: np.ndarray  # (T, n_line)
    bus_ids: list[str]
    line_ids: list[str]
    thresholds: UseCaseThresholds = field(default_factory=UseCaseThresholds)
    metadata: dict = field(default_factory=dict)

    @property
    def q99_voltage(self) -> float:
        return pooled_quantile(self.voltage_samples, VOLTAGE_QUANTILE)

    @property
    def q95_loading(self) -> float:
        return pooled_quantile(self.loading_samples, LOADING_QUANTILE)

    @property
    def verdicts(self) -> dict[str, bool]:
        return judge(self.q99_voltage, self.q95_loading, self.thresholds)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "variant": self.variant,
            "t0": self.t0,
            "t1": self.t1,
            "timesteps": self.t1 - self.t0,
            "seed": self.seed,
            "q99_voltage": self.q99_voltage,
            "q95_loading": self.q95_loading,
            "pass": self.verdicts,
            "thresholds": {k: {"voltage": v[0], "loading": v[1]} for k, v in self.thresholds},
            "counts": {"voltage": int(self.voltage_samples.size), "loading": int(self.loading_samples.size),
                       "buses": len(self.bus_ids), "lines": len(self.line_ids)},
            **self.metadata,
        }

    def element_rows(self) -> list[tuple[str, str, float]]:
        rows = [("voltage", b, pooled_quantile(self.voltage_samples[:, k], VOLTAGE_QUANTILE))
                for k, b in enumerate(self.bus_ids)]
        rows += [("line_loading", ln, pooled_quantile(self.loading_samples[:, k], LOADING_QUANTILE))
                 for k, ln in enumerate(self.line_ids)]
        return rows

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(directory / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("kind", "element", "quantile", "value"))
            for kind, el, val in self.element_rows():
                q = VOLTAGE_QUANTILE if kind == "voltage" else LOADING_QUANTILE
                w.writerow((kind, el, q, repr(val)))
        return path

    def write_samples(self, directory: str | Path) -> Path:
        path = Path(directory) / "samples.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "kind", "element", "value"))
            for j, t in enumerate(range(self.t0, self.t1)):
                for k, b in enumerate(self.bus_ids):
                    w.writerow((t, "voltage", b, repr(float(self.voltage_samples[j, k]))))
                for k, ln in enumerate(self.line_ids):
                    w.writerow((t, "line_loading", ln, repr(float(self.loading_samples[j, k]))))
        return path


def assess(grid: str, variant: dict, t0: int, seed: int, voltage: Sequence[np.ndarray], loading: Sequence[np.ndarray],
           bus_ids: list[str], line_ids: list[str], thresholds: UseCaseThresholds | None = None,
           metadata: dict | None = None) -> QualityReport:
    """Pool per-timestep samples into a report; verdicts are computed on access."""
    vs, ls = np.asarray(voltage, dtype=float), np.asarray(loading, dtype=float)
    if vs.size == 0 or ls.size == 0:
        raise ValueError("both voltage and loading samples are required")
    return QualityReport(grid, variant, t0, t0 + len(vs), seed, vs, ls, bus_ids, line_ids,
                         thresholds or UseCaseThresholds(), metadata or {})


def judge(q99_voltage: float, q95_loading: float, thresholds: UseCaseThresholds | None = None) -> dict[str, bool]:
    """A use case passes iff both quantiles lie within its limits."""
    thresholds = thresholds or UseCaseThresholds()
    return {name: bool(q99_voltage <= lv and q95_loading <= ll) for name, (lv, ll) in thresholds}


# comparison -----------------------------------------------------------------

class ComparisonError(ValueError):
    pass


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def compare_variants(reports: Iterable[dict | QualityReport]) -> list[dict]:
    """Side-by-side quantiles and verdicts, ordered by declared variant index."""
    rows = [r.to_dict() if isinstance(r, QualityReport) else r for r in reports]
    if len(rows) < 2:
        raise ComparisonError("need at least two reports to compare")
    ref = rows[0]
    for r in rows[1:]:
        if r["grid"] != ref["grid"] or r.get("grid_fingerprint") != ref.get("grid_fingerprint"):
            raise ComparisonError(f"reports cover different grids: {ref['grid']} vs {r['grid']}")
        if (r["t0"], r["t1"]) != (ref["t0"], ref["t1"]):
            raise ComparisonError(f"reports cover different timestep ranges: "
                                  f"[{ref['t0']}, {ref['t1']}) vs [{r['t0']}, {r['t1']})")
    rows = sorted(rows, key=lambda r: r.get("variant_index", 0))
    table = []
    for r in rows:
        v = r["variant"]
        table.append({
            "variant": v["name"],
            "substation": v["substation"],
            "ikvs_pct": v["ikvs_pct"],
            "imsys_pct": v["imsys_pct"],
            "q99_voltage": r["q99_voltage"],
            "q95_loading": r["q95_loading"],
            **{f"pass_{k}": bool(ok) for k, ok in r["pass"].items()},
        })
    return table


def write_comparison(table: list[dict], directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jpath = directory / "comparison.json"
    jpath.write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    cpath = directory / "comparison.csv"
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    return cpath, jpath
