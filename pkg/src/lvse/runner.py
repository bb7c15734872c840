"""Batch pipeline: power flow -> allocation -> measurements -> WLS -> quality report.

A scenario is one grid, a timestep window and one or more equipment variants,
described in an INI file::

    [scenario]
    grid = synth-rural          ; bundled name or directory (relative to this file)
    t0 = 0
    t1 = 672
    seed = 7                    ; master seed for measurement noise
    out = results
    workers = 1

    [pseudo]
    cos_phi = 0.95

    [variant 2]
    substation = digions
    ikvs_pct = 0
    imsys_pct = 0
    seed = 1                    ; allocation seed (random priority tier)
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .allocation import EquipmentVariant, MeasurementSpec, allocate, expand_to_specs, variant_from_mapping, write_allocation
from .estimation import build_model, derive_estimated_flows, wls_solve
from .evaluation import QualityReport, UseCaseThresholds, assess, compare_variants, write_comparison
from .grid import GRID_FILES, GridError, GridTopology, load_grid, resolve_grid_path
from .measurements import (PseudoConfig, PseudoModel, assemble_measurement_vector, pseudo_errors, timestep_rng,
                           write_measurements)
from .powerflow import BranchFlows, PowerFlowSolution, check_profile_coverage, solve_timestep

log = logging.getLogger("lvse")

DUMP_KINDS = ("truth", "measurements", "estimates", "samples")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    pf_tol: float = 1e-8
    pf_max_iter: int = 25
    se_tol: float = 1e-6
    se_max_iter: int = 50
    slack_vm_pu: float = 1.0
    clamp_noise: bool = True
    warm_start: bool = False


@dataclass
class ScenarioConfig:
    grid: str
    variants: list[EquipmentVariant]
    t0: int = 0
    t1: int = 96
    seed: int = 0
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    out_dir: str = "results"
    workers: int = 1
    dumps: tuple[str, ...] = ()
    base_dir: str = "."

    def __post_init__(self):
        if self.t1 <= self.t0 or self.t0 < 0:
            raise ConfigError(f"invalid timestep window [{self.t0}, {self.t1})")
        if not self.variants:
            raise ConfigError("no variants configured")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        bad = [d for d in self.dumps if d not in DUMP_KINDS]
        if bad:
            raise ConfigError(f"unknown dump kind(s) {bad}; choose from {DUMP_KINDS}")

    @property
    def grid_path(self) -> Path:
        p = Path(self.grid)
        if not p.is_absolute() and (Path(self.base_dir) / p).is_dir():
            p = Path(self.base_dir) / p
        try:
            return resolve_grid_path(p if p.is_dir() else self.grid)
        except GridError as exc:
            raise ConfigError(str(exc)) from None

    def canonical(self) -> dict:
        """Everything that influences results (not output location or worker count)."""
        return {
            "grid": Path(self.grid).name,
            "t0": self.t0,
            "t1": self.t1,
            "seed": self.seed,
            "pseudo": asdict(self.pseudo),
            "solver": asdict(self.solver),
            "variants": [v.as_dict() for v in self.variants],
        }


def _coerce(cls, section) -> dict:
    out = {}
    for f in fields(cls):
        if f.name not in section:
            continue
        raw = section[f.name].strip()
        default = f.default
        try:
            if isinstance(default, bool):
                out[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[f.name] = int(raw)
            elif isinstance(default, float):
                out[f.name] = float(raw)
            else:
                out[f.name] = raw or None
        except ValueError:
            raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
    unknown = set(section) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return out


def load_config(path: str | Path, **overrides) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "scenario" not in cp:
        raise ConfigError(f"{path}: missing [scenario] section")
    sc = cp["scenario"]
    solver_keys = {f.name for f in fields(SolverOptions)}
    known = {"grid", "t0", "t1", "seed", "out", "workers", "dump"} | solver_keys
    unknown = set(sc) - known
    if unknown:
        raise ConfigError(f"[scenario]: unknown keys {sorted(unknown)}")
    if "grid" not in sc:
        raise ConfigError("[scenario]: missing key 'grid'")

    variants = []
    for name in cp.sections():
        if name.startswith("variant"):
            vname = name[len("variant"):].strip() or str(len(variants) + 1)
            try:
                variants.append(variant_from_mapping(vname, cp[name]))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    try:
        pseudo = PseudoConfig(**_coerce(PseudoConfig, cp["pseudo"])) if "pseudo" in cp else PseudoConfig()
        solver = SolverOptions(**_coerce(SolverOptions, {k: v for k, v in sc.items() if k in solver_keys}))
        kwargs = dict(
            grid=sc["grid"],
            variants=variants,
            t0=int(sc.get("t0", 0)),
            t1=int(sc.get("t1", 96)),
            seed=int(sc.get("seed", 0)),
            pseudo=pseudo,
            solver=solver,
            out_dir=sc.get("out", "results"),
            workers=int(sc.get("workers", 1)),
            dumps=tuple(d.strip() for d in sc.get("dump", "").split(",") if d.strip()),
            base_dir=str(path.parent),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**kwargs)


def grid_fingerprint(path: Path) -> str:
    h = hashlib.sha256()
    for name in GRID_FILES:
        f = path / name
        if f.exists():
            h.update(name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def config_fingerprint(config: ScenarioConfig, grid_digest: str) -> str:
    payload = json.dumps({"config": config.canonical(), "grid": grid_digest}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# per-timestep work ---------------------------------------------------------

def _chunks(items: Sequence, n_chunks: int) -> list[Sequence]:
    size = max(1, math.ceil(len(items) / n_chunks))
    return [items[i:i + size] for i in range(0, len(items), size)]


def _truth_chunk(grid: GridTopology, steps: Sequence[int], opts: SolverOptions) -> list[PowerFlowSolution]:
    profiles = grid.profile_array()
    return [solve_timestep(grid, t, profiles, opts.slack_vm_pu, opts.pf_tol, opts.pf_max_iter) for t in steps]


@dataclass
class StepResult:
    t: int
    voltage: np.ndarray | None = None
    loading: np.ndarray | None = None
    objective: float = float("nan")
    iterations: int = 0
    measurements: list | None = None
    estimate: BranchFlows | None = None
    error: str | None = None


def _estimate_chunk(grid: GridTopology, truth: Sequence[PowerFlowSolution], specs: list[MeasurementSpec],
                    pseudo_cfg: PseudoConfig, seed: int, opts: SolverOptions, keep: tuple[str, ...]) -> list[StepResult]:
    from .evaluation import timestep_samples

    pseudo = PseudoModel(grid, pseudo_cfg)
    out = []
    previous = None
    for sol in truth:
        res = StepResult(sol.t)
        try:
            ms = assemble_measurement_vector(grid, specs, sol, pseudo, timestep_rng(seed, sol.t), sol.t,
                                             opts.clamp_noise)
            model = build_model(grid, ms)
            init = previous if opts.warm_start else None
            wls = wls_solve(model, init, tol=opts.se_tol, max_iter=opts.se_max_iter)
            if not wls.converged:
                raise RuntimeError(f"WLS did not converge after {wls.iterations} iterations: {wls.message}")
            previous = wls.state
            est = derive_estimated_flows(grid, wls)
            res.voltage, res.loading = timestep_samples(grid, sol, est)
            res.objective, res.iterations = wls.objective, wls.iterations
            if "measurements" in keep:
                res.measurements = ms
            if "estimates" in keep:
                res.estimate = est
        except Exception as exc:  # isolate failures per timestep; the pair is aborted by the caller
            res.error = f"{type(exc).__name__}: {exc}"
        out.append(res)
    return out


class _Pool:
    """Serial or process-parallel map over timestep chunks, results in input order."""

    def __init__(self, workers: int):
        self.workers = workers
        self.executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn, items: Sequence, grid: GridTopology, *args) -> list:
        """``fn(grid, chunk, *args)`` over chunks of ``items``, flattened."""
        if self.executor is None:
            return fn(grid, items, *args)
        futures = [self.executor.submit(fn, grid, part, *args) for part in _chunks(items, self.workers * 4)]
        out = []
        for f in futures:
            out.extend(f.result())
        return out

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


# outputs ---------------------------------------------------------------------

def _write_flows(w, t: int, grid: GridTopology, flows: BranchFlows) -> None:
    net = grid.network
    kw = net.pu_to_kw
    vm, va = flows.vm, flows.va
    for k, b in enumerate(net.bus_ids):
        w.writerow((t, b, "vm_pu", repr(float(vm[k]))))
        w.writerow((t, b, "va_rad", repr(float(va[k]))))
        w.writerow((t, b, "p_inj_kw", repr(float(kw(flows.s_bus[k].real)))))
        w.writerow((t, b, "q_inj_kvar", repr(float(kw(flows.s_bus[k].imag)))))
    amps = net.current_to_amps(flows.i_line)
    for k, ln in enumerate(net.line_ids):
        w.writerow((t, ln, "i_a", repr(float(amps[k]))))
        w.writerow((t, ln, "p_from_kw", repr(float(kw(flows.s_from[k].real)))))
        w.writerow((t, ln, "q_from_kvar", repr(float(kw(flows.s_from[k].imag)))))
        w.writerow((t, ln, "p_to_kw", repr(float(kw(flows.s_to[k].real)))))
        w.writerow((t, ln, "q_to_kvar", repr(float(kw(flows.s_to[k].imag)))))


def write_truth(path: Path, grid: GridTopology, truth: Sequence[PowerFlowSolution]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "element", "quantity", "value"))
        for sol in truth:
            _write_flows(w, sol.t, grid, sol)


def write_pseudo_errors(path: Path, rows: Sequence[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("prosumer", "rms_error_kw", "mean_abs_error_kw"))
        w.writerows((pid, repr(rms), repr(mae)) for pid, rms, mae in rows)


@dataclass
class RunArtifacts:
    out_dir: Path
    fingerprint: str
    reports: dict[str, Path] = field(default_factory=dict)
    quality: dict[str, QualityReport] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    log_path: Path | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


def _variant_dir(out: Path, name: str) -> Path:
    return out / f"variant-{name}"


def run_scenario(config: ScenarioConfig, thresholds: UseCaseThresholds | None = None) -> RunArtifacts:
    """Run every variant of ``config`` against one shared power-flow truth series."""
    out = Path(config.out_dir)
    if not out.is_absolute():
        out = Path(config.base_dir) / out if config.base_dir not in (".", "") else out
    out.mkdir(parents=True, exist_ok=True)

    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    pool = _Pool(config.workers)
    try:
        return _run(config, out, pool, thresholds)
    finally:
        pool.close()
        log.removeHandler(handler)
        handler.close()


def _run(config: ScenarioConfig, out: Path, pool: _Pool, thresholds) -> RunArtifacts:
    gpath = config.grid_path
    try:
        grid = load_grid(gpath)
    except GridError as exc:
        raise ConfigError(f"grid {gpath}: {exc}") from None
    gdigest = grid_fingerprint(gpath)
    fp = config_fingerprint(config, gdigest)
    art = RunArtifacts(out, fp, log_path=out / "run.log")
    log.info("scenario grid=%s window=[%d,%d) variants=%d workers=%d fingerprint=%s",
             grid.name, config.t0, config.t1, len(config.variants), config.workers, fp[:16])

    steps = list(range(config.t0, config.t1))
    try:
        check_profile_coverage(grid, config.t1)
    except GridError as exc:
        raise ConfigError(str(exc)) from None
    t_start = time.perf_counter()
    truth = pool.map(_truth_chunk, steps, grid, config.solver)
    art.timings["power_flow"] = time.perf_counter() - t_start
    log.info("power flow: %d timesteps in %.2f s", len(truth), art.timings["power_flow"])
    if "truth" in config.dumps:
        write_truth(out / "pf_truth.csv", grid, truth)
    if "measurements" in config.dumps:
        write_pseudo_errors(out / "pseudo_errors.csv", pseudo_errors(grid, PseudoModel(grid, config.pseudo), steps))

    keep = tuple(d for d in config.dumps if d in ("measurements", "estimates"))
    # warm starts chain timesteps, so chunking would change results
    se_pool = _Pool(1) if config.solver.warm_start else pool
    for index, variant in enumerate(config.variants):
        vdir = _variant_dir(out, variant.name)
        vdir.mkdir(parents=True, exist_ok=True)
        t_var = time.perf_counter()
        try:
            allocation = allocate(grid, variant)
            write_allocation(allocation, vdir / "allocation.csv")
            specs = expand_to_specs(grid, variant, allocation)
            results = se_pool.map(_estimate_chunk, truth, grid, specs, config.pseudo, config.seed, config.solver, keep)
            errors = [r for r in results if r.error]
            if errors:
                with open(vdir / "errors.log", "w", encoding="utf-8") as fh:
                    for r in errors:
                        fh.write(f"t={r.t}: {r.error}\n")
                raise RuntimeError(f"{len(errors)} timestep(s) failed, first at t={errors[0].t}: {errors[0].error}")
            its = [r.iterations for r in results]
            meta = {
                "variant_index": index,
                "variant_label": variant.describe(),
                "grid_fingerprint": gdigest,
                "config_fingerprint": fp,
                "allocation": {"ikvs": list(allocation.ikvs), "imsys": list(allocation.imsys)},
                "measurement_specs": len(specs),
                "diagnostics": {
                    "max_iterations": int(max(its)),
                    "mean_iterations": float(np.mean(its)),
                    "max_objective": float(max(r.objective for r in results)),
                },
            }
            report = assess(grid.name, variant.as_dict(), config.t0, config.seed,
                            [r.voltage for r in results], [r.loading for r in results],
                            list(grid.network.bus_ids), list(grid.network.line_ids), thresholds, meta)
            art.reports[variant.name] = report.write(vdir)
            art.quality[variant.name] = report
            _write_variant_dumps(vdir, grid, results, report, config.dumps)
        except Exception as exc:
            art.failed[variant.name] = f"{type(exc).__name__}: {exc}"
            log.error("variant %s failed: %s", variant.name, exc)
            continue
        finally:
            art.timings[f"variant {variant.name}"] = time.perf_counter() - t_var
        log.info("variant %s (%s): q99(V)=%.5f q95(I)=%.5f in %.2f s", variant.name, variant.describe(),
                 report.q99_voltage, report.q95_loading, art.timings[f"variant {variant.name}"])

    if len(art.quality) >= 2:
        write_comparison(compare_variants(list(art.quality.values())), out)
    manifest = {
        "fingerprint": fp,
        "grid": grid.name,
        "reports": {k: str(v.relative_to(out)) for k, v in art.reports.items()},
        "failed": art.failed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return art


def _write_variant_dumps(vdir: Path, grid: GridTopology, results: list[StepResult], report: QualityReport,
                         dumps: tuple[str, ...]) -> None:
    if "measurements" in dumps:
        with open(vdir / "measurements.csv", "w", newline="", encoding="utf-8") as fh:
            for k, r in enumerate(results):
                write_measurements(fh, r.t, r.measurements, header=(k == 0))
    if "estimates" in dumps:
        with open(vdir / "se_result.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "element", "quantity", "estimate"))
            for r in results:
                _write_flows(w, r.t, grid, r.estimate)
        with open(vdir / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "objective", "iterations", "converged"))
            for r in results:
                w.writerow((r.t, repr(r.objective), r.iterations, True))
    if "samples" in dumps:
        report.write_samples(vdir)
